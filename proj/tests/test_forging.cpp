#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "pctgan/forging.hpp"

using namespace pctgan;
using sim::ForgingGeometry;
using sim::InitialProfile;
using sim::SimParams;
using sim::StageSpec;

namespace {

ForgingGeometry box_geometry(double radius, double height, std::vector<StageSpec> stages,
                             std::int64_t size = 64) {
    InitialProfile p;
    p.base_radius = radius;
    p.height = height;
    p.taper = 0.0;
    return ForgingGeometry(p, std::move(stages), size);
}

}  // namespace

TEST_CASE("rasterize: axis-aligned rectangle has an exact pixel count") {
    auto geom = box_geometry(10.0, 20.0, {StageSpec{1.0, 0.0, 0.0, 1}});
    auto img = sim::rasterize_profile(geom.profile(0, 0.0));
    std::int64_t count = 0;
    for (auto v : img.data()) {
        CHECK((v == 0.0f || v == 255.0f));
        if (v == 255.0f) ++count;
    }
    CHECK(count == 200);
}

TEST_CASE("rasterize: empty profile gives an all-zero image") {
    auto img = sim::rasterize_radius_fn([](double) { return 0.3; }, 20.0, 64);
    for (auto v : img.data()) CHECK(v == 0.0f);
}

TEST_CASE("rasterize: semicircular profile area tracks the quadrature oracle") {
    const double r = 15.0;
    auto img = sim::rasterize_radius_fn(
        [r](double y) {
            const double d = r * r - (y - r) * (y - r);
            return d > 0.0 ? std::sqrt(d) : 0.0;
        },
        2.0 * r, 64);
    std::int64_t count = 0;
    for (auto v : img.data())
        if (v == 255.0f) ++count;
    const double expect = M_PI * r * r / 2.0;
    CHECK(std::abs(static_cast<double>(count) - expect) / expect <= 0.03);
}

TEST_CASE("solid volume: closed forms and validation") {
    auto geom = box_geometry(10.0, 20.0, {StageSpec{1.0, 0.0, 0.0, 1}});
    auto img = sim::rasterize_profile(geom.profile(0, 0.0));
    CHECK(sim::solid_volume(img) == doctest::Approx(2000.0 * M_PI).epsilon(1e-12));

    auto empty = ag::Tensor<float>::zeros({64, 64});
    CHECK(sim::solid_volume(empty) == 0.0);

    auto bad = ag::Tensor<float>::full({4, 4}, 0.5f);
    CHECK_THROWS_AS(sim::solid_volume(bad), Error);
}

TEST_CASE("generate: default parameters give 3 sub-processes and about 80 steps") {
    SimParams params;
    auto proc = sim::generate_process(2024, params);
    CHECK(proc.sub_processes == 3);
    CHECK(proc.boundaries.size() == 4);
    CHECK(proc.total_steps() >= 60);
    CHECK(proc.total_steps() <= 105);
    CHECK(static_cast<std::int64_t>(proc.frames.size()) == proc.total_steps() + 1);
    for (std::size_t i = 0; i < proc.frames.size(); ++i)
        CHECK(proc.frames[i].step_index == static_cast<std::int64_t>(i));
}

TEST_CASE("generate: zero deformation keeps every frame identical with zero volume drift") {
    SimParams params;
    auto geom = box_geometry(16.0, 40.0, {StageSpec{1.0, 0.0, 0.0, 5}, StageSpec{1.0, 0.0, 0.0, 5},
                                          StageSpec{1.0, 0.0, 0.0, 5}});
    auto proc = sim::generate_from_geometry(geom, 7, params);
    REQUIRE(proc.frames.size() == 16);
    const auto& first = proc.frames.front().channels;
    for (const auto& f : proc.frames)
        for (std::int64_t i = 0; i < first.numel(); ++i) CHECK(f.channels.data()[i] == first.data()[i]);
    auto shape0 = ag::Tensor<float>::from_data({64, 64},
                                               {first.data().begin(), first.data().begin() + 64 * 64});
    auto shapeN = ag::Tensor<float>::from_data(
        {64, 64}, {proc.frames.back().channels.data().begin(),
                   proc.frames.back().channels.data().begin() + 64 * 64});
    CHECK(sim::solid_volume(shape0) == sim::solid_volume(shapeN));
}

TEST_CASE("generate: bit-identical under the same seed") {
    SimParams params;
    auto a = sim::generate_process(99, params);
    auto b = sim::generate_process(99, params);
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t i = 0; i < a.frames.size(); ++i) {
        for (std::int64_t j = 0; j < a.frames[i].channels.numel(); ++j)
            REQUIRE(a.frames[i].channels.data()[j] == b.frames[i].channels.data()[j]);
        REQUIRE(a.frames[i].timing.values == b.frames[i].timing.values);
    }
}

TEST_CASE("generate: sub-process boundary frames agree between parameterizations") {
    SimParams params;
    auto geom = ForgingGeometry::random(5, params);
    for (int k = 0; k + 1 < geom.stages(); ++k) {
        auto end_k = geom.profile(k, 1.0);
        auto start_k1 = geom.profile(k + 1, 0.0);
        auto img_a = sim::rasterize_profile(end_k);
        auto img_b = sim::rasterize_profile(start_k1);
        for (std::int64_t i = 0; i < img_a.numel(); ++i) REQUIRE(img_a.data()[i] == img_b.data()[i]);
        // physics relative to the initial state must agree as well
        auto initial = geom.profile(0, 0.0);
        auto pa = sim::compute_physics_channels(initial, end_k);
        auto pb = sim::compute_physics_channels(initial, start_k1);
        for (std::int64_t i = 0; i < pa.numel(); ++i)
            REQUIRE(pa.data()[i] == doctest::Approx(pb.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("generate: boundary frames are shared and sub-process ranges overlap") {
    SimParams params;
    auto proc = sim::generate_process(31, params);
    for (int k = 0; k + 1 < proc.sub_processes; ++k) {
        auto [lo_k, hi_k] = proc.sub_process_range(k);
        auto [lo_k1, hi_k1] = proc.sub_process_range(k + 1);
        CHECK(hi_k == lo_k1);
        (void)lo_k;
        (void)hi_k1;
    }
}

TEST_CASE("generate: volume drift stays within 3 percent") {
    SimParams params;
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        auto proc = sim::generate_process(seed, params);
        const auto s = proc.image_size;
        auto shape_of = [&](const sim::Frame& f) {
            return ag::Tensor<float>::from_data({s, s},
                                                {f.channels.data().begin(), f.channels.data().begin() + s * s});
        };
        const double v0 = sim::solid_volume(shape_of(proc.frames.front()));
        REQUIRE(v0 > 0.0);
        for (const auto& f : proc.frames) {
            const double v = sim::solid_volume(shape_of(f));
            CHECK(std::abs(v - v0) / v0 <= 0.03);
        }
    }
}

TEST_CASE("physics: identity deformation yields zero fields") {
    auto geom = box_geometry(14.0, 36.0, {StageSpec{0.9, 0.1, 0.0, 4}});
    auto before = geom.profile(0, 0.0);
    auto fields = sim::compute_physics_channels(before, before);
    for (auto v : fields.data()) CHECK(v == 0.0f);
}

TEST_CASE("physics: uniform axial compression gives homogeneous strains") {
    const double rho = 0.8;
    auto geom = box_geometry(14.0, 36.0, {StageSpec{rho, 0.0, 0.0, 4}});
    auto before = geom.profile(0, 0.0);
    auto after = geom.profile(0, 1.0);
    auto mask = sim::rasterize_profile(after);
    auto fields = sim::compute_physics_channels(before, after);
    const auto s = geom.image_size();
    const float eps_y = static_cast<float>(std::log(rho));
    const float eps_r = static_cast<float>(-0.5 * std::log(rho));
    std::int64_t inside = 0;
    for (std::int64_t pix = 0; pix < s * s; ++pix) {
        if (mask.data()[pix] == 0.0f) {
            // outside material: all channels zero
            for (int c = 0; c < 4; ++c) CHECK(fields.data()[c * s * s + pix] == 0.0f);
            continue;
        }
        ++inside;
        CHECK(fields.data()[2 * s * s + pix] == doctest::Approx(eps_r).epsilon(1e-5));
        CHECK(fields.data()[3 * s * s + pix] == doctest::Approx(eps_y).epsilon(1e-5));
        // toy constitutive model with default e_toy=1: stress equals strain
        CHECK(fields.data()[0 * s * s + pix] == fields.data()[2 * s * s + pix]);
        CHECK(fields.data()[1 * s * s + pix] == fields.data()[3 * s * s + pix]);
    }
    CHECK(inside > 100);
}

TEST_CASE("physics: composed two-stage strain matches the displacement-gradient oracle") {
    auto geom = box_geometry(15.0, 40.0, {StageSpec{0.85, 0.15, 0.1, 4}, StageSpec{0.9, 0.12, -0.2, 4}});
    auto target = geom.profile(1, 0.7);
    const double h = 1e-4;
    int checked = 0;
    for (double y0 = 2.0; y0 < 38.0; y0 += 4.0) {
        for (double r0 = 0.5; r0 < 14.0; r0 += 2.5) {
            auto p = geom.push_forward(r0, y0, target);
            auto pr = geom.push_forward(r0 + h, y0, target);
            auto pl = geom.push_forward(r0 - h, y0, target);
            auto pu = geom.push_forward(r0, y0 + h, target);
            auto pd = geom.push_forward(r0, y0 - h, target);
            const double fd_eps_r = std::log((pr.r - pl.r) / (2 * h));
            const double fd_eps_y = std::log((pu.y - pd.y) / (2 * h));
            CHECK(std::abs(p.eps_r - fd_eps_r) <= 1e-3);
            CHECK(std::abs(p.eps_y - fd_eps_y) <= 1e-3);
            ++checked;
        }
    }
    CHECK(checked > 30);
}

TEST_CASE("physics: pull_back inverts push_forward") {
    auto geom = box_geometry(15.0, 40.0, {StageSpec{0.85, 0.15, 0.1, 4}, StageSpec{0.9, 0.12, -0.2, 4}});
    auto target = geom.profile(1, 0.35);
    for (double y0 = 1.0; y0 < 39.0; y0 += 3.7) {
        for (double r0 = 0.25; r0 < 14.5; r0 += 1.9) {
            auto fwd = geom.push_forward(r0, y0, target);
            auto back = geom.pull_back(target, fwd.r, fwd.y);
            CHECK(back.r == doctest::Approx(r0).epsilon(1e-9));
            CHECK(back.y == doctest::Approx(y0).epsilon(1e-9));
            CHECK(back.eps_r == doctest::Approx(fwd.eps_r).epsilon(1e-9));
        }
    }
}

TEST_CASE("deposit: collisions keep the largest magnitude") {
    auto grid = ag::Tensor<float>::zeros({8, 8});
    std::vector<double> r{2.3, 2.7, 2.5, 5.1}, y{3.2, 3.8, 3.5, 1.0}, v{0.5, -2.0, 1.0, 0.25};
    sim::deposit_max_abs(r, y, v, grid);
    CHECK(grid.data()[3 * 8 + 2] == -2.0f);  // |-2| beats 1.0 and 0.5 in the same cell
    CHECK(grid.data()[1 * 8 + 5] == 0.25f);
}

TEST_CASE("generation errors report the offending step") {
    SimParams params;
    // a bulge large enough to push the radius off the raster mid-process
    auto geom = box_geometry(26.0, 50.0, {StageSpec{0.55, 0.45, 0.0, 10}, StageSpec{0.6, 0.45, 0.0, 10},
                                          StageSpec{0.6, 0.45, 0.0, 10}});
    try {
        auto proc = sim::generate_from_geometry(geom, 1, params);
        // if the geometry survives rasterization the premise is wrong
        CHECK(false);
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step") != std::string::npos);
    }
}

TEST_CASE("normalization: clip threshold matches the full-sort oracle") {
    SimParams params;
    std::vector<sim::ForgingProcess> split;
    split.push_back(sim::generate_process(1, params));
    split.push_back(sim::generate_process(2, params));
    auto stats = sim::compute_normalization(split);

    const auto s = params.image_size;
    for (int c = 0; c < 4; ++c) {
        std::vector<double> magnitudes;
        for (const auto& proc : split)
            for (const auto& f : proc.frames) {
                const auto d = f.channels.data();
                for (std::int64_t pix = 0; pix < s * s; ++pix)
                    if (d[pix] > 0.0f) magnitudes.push_back(std::abs(d[(c + 1) * s * s + pix]));
            }
        const double expect = oracle::abs_percentile_fullsort(magnitudes, 0.997);
        CHECK(std::abs(stats.clip[static_cast<std::size_t>(c)] - expect) <= 1e-6);
    }
}

TEST_CASE("normalization: scaling and clipping behaviour") {
    // hand-built process: one frame, known channel values
    sim::ForgingProcess proc;
    proc.image_size = 4;
    proc.sub_processes = 1;
    proc.boundaries = {0, 0};
    sim::Frame f;
    std::vector<float> ch(5 * 16, 0.0f);
    for (int i = 0; i < 16; ++i) ch[i] = 255.0f;  // all material
    // channel 1: symmetric values in [-2, 2]; channel 2: one huge outlier
    for (int i = 0; i < 16; ++i) ch[16 + i] = -2.0f + 4.0f * static_cast<float>(i) / 15.0f;
    for (int i = 0; i < 16; ++i) ch[32 + i] = 0.01f * static_cast<float>(i);
    ch[32 + 7] = 1000.0f;
    f.channels = ag::Tensor<float>::from_data({5, 4, 4}, ch);
    f.timing = labels::make_timing_label(1, 0, 1, 1);
    proc.frames.push_back(f);

    auto stats = sim::compute_normalization({proc});
    auto copy = proc;
    sim::apply_normalization(copy, stats);
    const auto d = copy.frames[0].channels.data();
    for (int i = 0; i < 16; ++i) CHECK(d[i] == 1.0f);  // shape mapped to +1
    float max1 = 0.0f;
    for (int i = 0; i < 16; ++i) max1 = std::max(max1, std::abs(d[16 + i]));
    CHECK(max1 == doctest::Approx(1.0f).epsilon(1e-3));
    CHECK(d[32 + 7] == 1.0f);  // outlier clipped to the ceiling
    // bulk of channel 2 preserved up to scale
    for (int i = 0; i < 7; ++i)
        CHECK(d[32 + i] == doctest::Approx(0.01f * i / stats.clip[1]).epsilon(1e-4));
    CHECK(copy.normalized);
    CHECK_THROWS_AS(sim::apply_normalization(copy, stats), Error);
}

TEST_CASE("channel layout: physics vanish outside the material mask") {
    SimParams params;
    auto proc = sim::generate_process(3, params);
    const auto s = proc.image_size;
    std::size_t outside_checked = 0;
    for (const auto& f : proc.frames) {
        const auto d = f.channels.data();
        for (std::int64_t pix = 0; pix < s * s; ++pix) {
            if (d[pix] != 0.0f) continue;
            for (int c = 1; c < 5; ++c) REQUIRE(d[c * s * s + pix] == 0.0f);
            ++outside_checked;
        }
    }
    CHECK(outside_checked > 0);
}
