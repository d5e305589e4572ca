#include "pctgan/forging.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pctgan::sim {

namespace {
constexpr double kRasterMargin = 1.0;  // pixels kept free at the outer border

double sq(double x) { return x * x; }
}  // namespace

// ---- geometry -----------------------------------------------------------------

ForgingGeometry::ForgingGeometry(InitialProfile initial, std::vector<StageSpec> stages,
                                 std::int64_t image_size, double e_toy)
    : initial_(initial), stages_(std::move(stages)), image_size_(image_size), e_toy_(e_toy) {
    if (image_size_ < 8) throw_invalid("ForgingGeometry: image size must be >= 8");
    if (initial_.base_radius <= 0 || initial_.height <= 0)
        throw_invalid("ForgingGeometry: initial profile must have positive extent");
    if (initial_.height >= static_cast<double>(image_size_) - kRasterMargin)
        throw_invalid("ForgingGeometry: initial height does not fit the raster");
    if (initial_.taper < 0 || initial_.taper >= 1)
        throw_invalid("ForgingGeometry: taper must lie in [0,1)");
    if (initial_.top_factor <= 0 || initial_.top_factor > 1)
        throw_invalid("ForgingGeometry: top factor must lie in (0,1]");
    if (initial_.dome_start <= 0 || initial_.dome_start >= 1)
        throw_invalid("ForgingGeometry: dome start must lie in (0,1)");
    if (stages_.empty()) throw_invalid("ForgingGeometry: need at least one stage");
    for (std::size_t k = 0; k < stages_.size(); ++k) {
        const auto& st = stages_[k];
        if (!(st.rho > 0.0) || st.rho > 1.0)
            throw_invalid("ForgingGeometry: stage " + std::to_string(k) + " rho must lie in (0,1]");
        if (st.bulge < 0.0 || st.bulge > 0.5)
            throw_invalid("ForgingGeometry: stage " + std::to_string(k) + " bulge must lie in [0,0.5]");
        if (std::abs(st.center_shift) > 0.5)
            throw_invalid("ForgingGeometry: stage " + std::to_string(k) + " center shift outside [-0.5,0.5]");
        if (st.steps < 1) throw_invalid("ForgingGeometry: stage " + std::to_string(k) + " needs steps >= 1");
    }
    base_heights_.resize(stages_.size() + 1);
    base_heights_[0] = initial_.height;
    c_full_.resize(stages_.size());
    for (std::size_t k = 0; k < stages_.size(); ++k) {
        c_full_[k] = compute_c(static_cast<int>(k), 1.0);
        base_heights_[k + 1] = base_heights_[k] * stages_[k].rho;
    }
}

ForgingGeometry ForgingGeometry::random(std::uint64_t seed, const SimParams& params) {
    Rng rng(Rng::derive_seed(seed, 0xf0e6));
    const double s = static_cast<double>(params.image_size);
    InitialProfile initial;
    initial.base_radius = rng.uniform(0.30, 0.34) * s;
    initial.height = rng.uniform(0.66, 0.76) * s;
    initial.taper = rng.uniform(0.10, 0.18);
    initial.dome_start = rng.uniform(0.55, 0.70);
    initial.top_factor = rng.uniform(0.35, 0.55);
    std::vector<StageSpec> stages;
    stages.reserve(static_cast<std::size_t>(params.sub_processes));
    for (int k = 0; k < params.sub_processes; ++k) {
        StageSpec st;
        st.rho = rng.uniform(0.84, 0.92);
        st.bulge = rng.uniform(0.08, 0.18);
        st.center_shift = rng.uniform(-0.25, 0.25);
        st.steps = static_cast<std::int64_t>(params.min_steps +
                                             static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(
                                                 params.max_steps - params.min_steps + 1))));
        stages.push_back(st);
    }
    return ForgingGeometry(initial, std::move(stages), params.image_size, params.e_toy);
}

double ForgingGeometry::base_height(int stage) const {
    return base_heights_.at(static_cast<std::size_t>(stage));
}

double ForgingGeometry::base_radius(int stage, double y) const {
    if (stage == 0) {
        if (y < 0.0 || y > initial_.height) return 0.0;
        const double yhat = y / initial_.height;
        double r = initial_.base_radius * (1.0 - initial_.taper * yhat * yhat);
        if (yhat > initial_.dome_start && initial_.top_factor < 1.0) {
            const double t = (yhat - initial_.dome_start) / (1.0 - initial_.dome_start);
            r *= 1.0 - (1.0 - initial_.top_factor) * t * t;
        }
        return r;
    }
    const int prev = stage - 1;
    const auto& st = stages_[static_cast<std::size_t>(prev)];
    const double yb = y / st.rho;
    if (yb < 0.0 || yb > base_heights_[static_cast<std::size_t>(prev)]) return 0.0;
    return base_radius(prev, yb) * g_factor(prev, 1.0, c_full_[static_cast<std::size_t>(prev)], yb);
}

double ForgingGeometry::rho_at(int stage, double theta) const {
    const auto& st = stages_[static_cast<std::size_t>(stage)];
    return 1.0 + (st.rho - 1.0) * theta;
}

double ForgingGeometry::bulge_q(int stage, double y_frac) const {
    const auto& st = stages_[static_cast<std::size_t>(stage)];
    return 1.0 - sq(2.0 * y_frac - 1.0 - st.center_shift);
}

double ForgingGeometry::g_factor(int stage, double theta, double c_theta, double y_base) const {
    const auto& st = stages_[static_cast<std::size_t>(stage)];
    const double h = base_heights_[static_cast<std::size_t>(stage)];
    const double q = bulge_q(stage, y_base / h);
    return c_theta * (1.0 + st.bulge * theta * q) / std::sqrt(rho_at(stage, theta));
}

// Volume-conserving normalization: with the map y' = rho*y, r' = r*g(y) and
// g = c*(1+b*theta*q)/sqrt(rho), the rho factors cancel and
// c^2 = Int R^2 dy / Int R^2 (1+b*theta*q)^2 dy over the stage base profile.
double ForgingGeometry::compute_c(int stage, double theta) const {
    const auto& st = stages_[static_cast<std::size_t>(stage)];
    if (st.bulge * theta == 0.0) return 1.0;
    const double h = base_heights_[static_cast<std::size_t>(stage)];
    constexpr int kIntervals = 1024;  // Simpson; even
    double num = 0.0, den = 0.0;
    for (int i = 0; i <= kIntervals; ++i) {
        const double y = h * static_cast<double>(i) / kIntervals;
        const double w = (i == 0 || i == kIntervals) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        const double r2 = sq(base_radius(stage, std::min(y, h)));
        const double f = 1.0 + st.bulge * theta * bulge_q(stage, y / h);
        num += w * r2;
        den += w * r2 * f * f;
    }
    if (den <= 0.0) throw_numeric("ForgingGeometry: degenerate volume normalization");
    return std::sqrt(num / den);
}

ProfileFunction ForgingGeometry::profile(int stage, double theta) const {
    if (stage < 0 || stage >= stages()) throw_invalid("ForgingGeometry::profile: stage out of range");
    if (theta < 0.0 || theta > 1.0) throw_invalid("ForgingGeometry::profile: theta outside [0,1]");
    ProfileFunction p;
    p.geometry = this;
    p.stage = stage;
    p.theta = theta;
    p.c_theta = compute_c(stage, theta);
    p.height = base_heights_[static_cast<std::size_t>(stage)] * rho_at(stage, theta);
    return p;
}

double ProfileFunction::radius(double y) const {
    if (y < 0.0 || y > height) return 0.0;
    const double rho = 1.0 + (geometry->stage(stage).rho - 1.0) * theta;
    const double yb = y / rho;
    return geometry->base_radius(stage, yb) * geometry->g_factor(stage, theta, c_theta, yb);
}

ForgingGeometry::PointState ForgingGeometry::push_forward(double r0, double y0,
                                                          const ProfileFunction& to) const {
    if (to.geometry != this) throw_invalid("push_forward: profile belongs to a different geometry");
    PointState p{r0, y0, 0.0, 0.0};
    for (int k = 0; k <= to.stage; ++k) {
        const double theta = (k == to.stage) ? to.theta : 1.0;
        if (theta == 0.0) break;
        const double c = (k == to.stage) ? to.c_theta : c_full_[static_cast<std::size_t>(k)];
        const double g = g_factor(k, theta, c, p.y);
        const double rho = rho_at(k, theta);
        p.eps_r += std::log(g);
        p.eps_y += std::log(rho);
        p.r *= g;
        p.y *= rho;
    }
    return p;
}

ForgingGeometry::PointState ForgingGeometry::pull_back(const ProfileFunction& at, double r, double y) const {
    if (at.geometry != this) throw_invalid("pull_back: profile belongs to a different geometry");
    PointState p{r, y, 0.0, 0.0};
    for (int k = at.stage; k >= 0; --k) {
        const double theta = (k == at.stage) ? at.theta : 1.0;
        if (theta == 0.0) continue;
        const double c = (k == at.stage) ? at.c_theta : c_full_[static_cast<std::size_t>(k)];
        const double rho = rho_at(k, theta);
        const double yb = p.y / rho;
        const double g = g_factor(k, theta, c, yb);
        p.eps_r += std::log(g);
        p.eps_y += std::log(rho);
        p.r /= g;
        p.y = yb;
    }
    return p;
}

// ---- rasterization ----------------------------------------------------------------

ag::Tensor<float> rasterize_profile(const ProfileFunction& profile) {
    if (profile.geometry == nullptr) throw_invalid("rasterize_profile: undefined profile");
    return rasterize_radius_fn([&profile](double y) { return profile.radius(y); }, profile.height,
                               profile.geometry->image_size());
}

void deposit_max_abs(const std::vector<double>& r, const std::vector<double>& y,
                     const std::vector<double>& value, ag::Tensor<float>& grid) {
    if (r.size() != y.size() || r.size() != value.size())
        throw_invalid("deposit_max_abs: sample arrays must have equal length");
    if (grid.rank() != 2) throw_invalid("deposit_max_abs: grid must be rank-2");
    const auto h = grid.dim(0), w = grid.dim(1);
    auto g = grid.mutable_data();
    for (std::size_t i = 0; i < r.size(); ++i) {
        const auto x = static_cast<std::int64_t>(std::floor(r[i]));
        const auto row = static_cast<std::int64_t>(std::floor(y[i]));
        if (x < 0 || x >= w || row < 0 || row >= h) continue;
        auto& cell = g[row * w + x];
        const auto v = static_cast<float>(value[i]);
        if (std::abs(v) > std::abs(cell)) cell = v;
    }
}

namespace {

// Push a dense grid of material samples from `before` to `after`, splat the
// four physics values, then repair covered-but-empty pixels with the exact
// inverse map. Everything outside the rasterized mask stays zero.
ag::Tensor<float> physics_fields(const ProfileFunction& before, const ProfileFunction& after,
                                 const ag::Tensor<float>& mask) {
    const auto* geom = after.geometry;
    const auto s = geom->image_size();
    const double e_toy = geom->e_toy();
    ag::Tensor<float> out = ag::Tensor<float>::zeros({4, s, s});
    std::array<ag::Tensor<float>, 4> planes;
    for (auto& p : planes) p = ag::Tensor<float>::zeros({s, s});

    constexpr double kSpacing = 0.25;
    std::vector<double> rs, ys;
    std::vector<std::array<double, 4>> vals;
    const std::int64_t ny = static_cast<std::int64_t>(std::ceil(before.height / kSpacing));
    for (std::int64_t iy = 0; iy < ny; ++iy) {
        const double y0 = (static_cast<double>(iy) + 0.5) * kSpacing;
        if (y0 >= before.height) break;
        const double rad = before.radius(y0);
        const std::int64_t nx = static_cast<std::int64_t>(std::ceil(rad / kSpacing));
        for (std::int64_t ix = 0; ix < nx; ++ix) {
            const double r0 = (static_cast<double>(ix) + 0.5) * kSpacing;
            if (r0 >= rad) break;
            // strains are relative to `before`: total(after) - total(before)
            const auto b = geom->pull_back(before, r0, y0);
            const auto a = geom->push_forward(b.r, b.y, after);
            rs.push_back(a.r);
            ys.push_back(a.y);
            vals.push_back({e_toy * (a.eps_r - b.eps_r), e_toy * (a.eps_y - b.eps_y), a.eps_r - b.eps_r,
                            a.eps_y - b.eps_y});
        }
    }
    std::vector<double> channel(rs.size());
    for (int c = 0; c < 4; ++c) {
        for (std::size_t i = 0; i < rs.size(); ++i) channel[i] = vals[i][c];
        deposit_max_abs(rs, ys, channel, planes[static_cast<std::size_t>(c)]);
    }

    // mask-clip + hole repair
    auto md = mask.data();
    auto od = out.mutable_data();
    for (std::int64_t row = 0; row < s; ++row) {
        for (std::int64_t x = 0; x < s; ++x) {
            const auto pix = row * s + x;
            if (md[pix] <= 0.0f) continue;
            bool hole = true;
            for (int c = 0; c < 4 && hole; ++c)
                if (planes[static_cast<std::size_t>(c)].data()[pix] != 0.0f) hole = false;
            if (hole) {
                const auto b0 = geom->pull_back(after, static_cast<double>(x) + 0.5,
                                                static_cast<double>(row) + 0.5);
                const auto at_before = geom->push_forward(b0.r, b0.y, before);
                const double er = b0.eps_r - at_before.eps_r;
                const double ey = b0.eps_y - at_before.eps_y;
                od[(0 * s + row) * s + x] = static_cast<float>(e_toy * er);
                od[(1 * s + row) * s + x] = static_cast<float>(e_toy * ey);
                od[(2 * s + row) * s + x] = static_cast<float>(er);
                od[(3 * s + row) * s + x] = static_cast<float>(ey);
            } else {
                for (int c = 0; c < 4; ++c)
                    od[(c * s + row) * s + x] = planes[static_cast<std::size_t>(c)].data()[pix];
            }
        }
    }
    return out;
}

}  // namespace

ag::Tensor<float> compute_physics_channels(const ProfileFunction& before, const ProfileFunction& after) {
    if (before.geometry == nullptr || after.geometry == nullptr)
        throw_invalid("compute_physics_channels: undefined profiles");
    if (before.geometry != after.geometry)
        throw_invalid("compute_physics_channels: profiles from different geometries have no material map");
    if (after.stage < before.stage || (after.stage == before.stage && after.theta < before.theta))
        throw_invalid("compute_physics_channels: `after` must not precede `before`");
    auto mask = rasterize_profile(after);
    return physics_fields(before, after, mask);
}

double solid_volume(const ag::Tensor<float>& shape) {
    if (shape.rank() != 2) throw_invalid("solid_volume: expected a rank-2 image");
    const auto h = shape.dim(0), w = shape.dim(1);
    bool normalized_convention = false, raw_convention = false;
    double volume = 0.0;
    const auto d = shape.data();
    for (std::int64_t row = 0; row < h; ++row)
        for (std::int64_t x = 0; x < w; ++x) {
            const float v = d[row * w + x];
            bool white;
            if (std::abs(v) < 1e-6f) {
                white = false;
            } else if (std::abs(v - 255.0f) < 1e-6f) {
                white = true;
                raw_convention = true;
            } else if (std::abs(v - 1.0f) < 1e-6f) {
                white = true;
                normalized_convention = true;
            } else if (std::abs(v + 1.0f) < 1e-6f) {
                white = false;
                normalized_convention = true;
            } else {
                throw_invalid("solid_volume: non-binary pixel value " + std::to_string(v));
            }
            if (white) volume += M_PI * static_cast<double>(2 * x + 1);
        }
    if (raw_convention && normalized_convention)
        throw_invalid("solid_volume: mixed raw and normalized pixel conventions");
    return volume;
}

// ---- process generation ---------------------------------------------------------

namespace {

Frame render_frame(const ForgingGeometry& geom, int stage, double theta, int label_n, std::int64_t label_s,
                   std::int64_t label_steps, const SimParams& params, std::int64_t step_index) {
    const auto initial = geom.profile(0, 0.0);
    const auto now = geom.profile(stage, theta);
    auto mask = rasterize_profile(now);
    auto physics = physics_fields(initial, now, mask);
    const auto s = geom.image_size();
    std::vector<float> stacked(static_cast<std::size_t>(5 * s * s));
    std::copy(mask.data().begin(), mask.data().end(), stacked.begin());
    std::copy(physics.data().begin(), physics.data().end(), stacked.begin() + s * s);
    Frame f;
    f.channels = ag::Tensor<float>::from_data({5, s, s}, std::move(stacked));
    f.timing = labels::make_timing_label(label_n, label_s, label_steps, params.sub_processes,
                                         params.orientation);
    f.step_index = step_index;
    return f;
}

}  // namespace

std::pair<std::int64_t, std::int64_t> ForgingProcess::sub_process_range(int k) const {
    if (k < 0 || k >= sub_processes) throw_invalid("sub_process_range: index out of range");
    return {boundaries.at(static_cast<std::size_t>(k)), boundaries.at(static_cast<std::size_t>(k) + 1)};
}

ForgingProcess generate_process(std::uint64_t seed, const SimParams& params) {
    if (params.sub_processes < 1) throw_invalid("generate_process: need at least one sub-process");
    if (params.min_steps < 1 || params.max_steps < params.min_steps)
        throw_invalid("generate_process: invalid step-count range");
    return generate_from_geometry(ForgingGeometry::random(seed, params), seed, params);
}

ForgingProcess generate_from_geometry(const ForgingGeometry& geom, std::uint64_t seed,
                                      const SimParams& params) {
    if (geom.stages() != params.sub_processes)
        throw_invalid("generate_from_geometry: geometry stage count != configured sub-processes");
    ForgingProcess process;
    process.seed = seed;
    process.image_size = params.image_size;
    process.sub_processes = params.sub_processes;
    process.boundaries.push_back(0);

    for (int k = 0; k < geom.stages(); ++k) {
        const auto steps = geom.stage(k).steps;
        const std::int64_t first = (k == 0) ? 0 : 1;  // boundary frame already emitted by stage k-1
        for (std::int64_t s = first; s <= steps; ++s) {
            const double theta = static_cast<double>(s) / static_cast<double>(steps);
            const auto global = static_cast<std::int64_t>(process.frames.size());
            try {
                process.frames.push_back(render_frame(geom, k, theta, k + 1, s, steps, params, global));
            } catch (const Error& e) {
                throw Error(e.kind(), "generate_process: step " + std::to_string(global) +
                                          " (sub-process " + std::to_string(k + 1) + "): " + e.what());
            }
        }
        process.boundaries.push_back(static_cast<std::int64_t>(process.frames.size()) - 1);
    }
    return process;
}

// ---- normalization ----------------------------------------------------------------

NormalizationStats compute_normalization(const std::vector<ForgingProcess>& train_split) {
    if (train_split.empty()) throw_invalid("compute_normalization: empty dataset");
    for (const auto& p : train_split)
        if (p.normalized) throw_state("compute_normalization: expects raw (unnormalized) processes");
    NormalizationStats stats;
    const auto s = train_split.front().image_size;
    for (int c = 0; c < 4; ++c) {
        std::vector<double> magnitudes;
        for (const auto& proc : train_split) {
            for (const auto& frame : proc.frames) {
                const auto d = frame.channels.data();
                for (std::int64_t pix = 0; pix < s * s; ++pix) {
                    if (d[pix] <= 0.0f) continue;  // outside material
                    magnitudes.push_back(std::abs(static_cast<double>(d[(c + 1) * s * s + pix])));
                }
            }
        }
        if (magnitudes.empty()) {
            stats.clip[static_cast<std::size_t>(c)] = 1.0;
            continue;
        }
        // 99.7th percentile with linear interpolation between order statistics
        const double pos = 0.997 * static_cast<double>(magnitudes.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        std::nth_element(magnitudes.begin(), magnitudes.begin() + static_cast<std::ptrdiff_t>(lo),
                         magnitudes.end());
        const double vlo = magnitudes[lo];
        double threshold = vlo;
        if (lo + 1 < magnitudes.size()) {
            const double vhi = *std::min_element(magnitudes.begin() + static_cast<std::ptrdiff_t>(lo) + 1,
                                                 magnitudes.end());
            threshold = vlo + (vhi - vlo) * (pos - static_cast<double>(lo));
        }
        stats.clip[static_cast<std::size_t>(c)] = threshold > 0.0 ? threshold : 1.0;
    }
    return stats;
}

void apply_normalization(ForgingProcess& process, const NormalizationStats& stats) {
    if (process.normalized) throw_state("apply_normalization: process already normalized");
    const auto s = process.image_size;
    for (auto& frame : process.frames) {
        auto d = frame.channels.mutable_data();
        for (std::int64_t pix = 0; pix < s * s; ++pix) d[pix] = d[pix] > 0.0f ? 1.0f : -1.0f;
        for (int c = 0; c < 4; ++c) {
            const auto clip = static_cast<float>(stats.clip[static_cast<std::size_t>(c)]);
            for (std::int64_t pix = 0; pix < s * s; ++pix) {
                auto& v = d[(c + 1) * s * s + pix];
                v = std::clamp(v, -clip, clip) / clip;
            }
        }
    }
    process.normalized = true;
}

}  // namespace pctgan::sim
