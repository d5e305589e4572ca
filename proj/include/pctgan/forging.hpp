#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "pctgan/labels.hpp"
#include "pctgan/tensor.hpp"

// Procedural die-forging data: rotationally symmetric billets compressed
// through N sub-processes. The half cross-section is described by a radius
// profile over height; each sub-process applies an axial compression with a
// radius-dependent bulge whose normalization conserves the solid-of-revolution
// volume in the continuous model. The material map is analytic and invertible,
// which yields exact per-point logarithmic strains.

namespace pctgan::sim {

struct StageSpec {
    double rho = 0.85;          // height ratio at full deformation, in (0,1]
    double bulge = 0.15;        // radial bulge amplitude
    double center_shift = 0.0;  // vertical offset of the bulge peak, in [-0.5,0.5]
    std::int64_t steps = 25;    // frames in this sub-process
};

struct InitialProfile {
    double base_radius = 20.0;  // pixels
    double height = 44.0;       // pixels
    double taper = 0.05;        // radius shrinks by taper * (y/H)^2
    // rounded shoulder: above dome_start*H the radius blends quadratically
    // down to top_factor * radius; top_factor = 1 keeps a flat-topped billet
    double dome_start = 0.6;
    double top_factor = 1.0;
};

struct SimParams {
    std::int64_t image_size = 64;
    int sub_processes = 3;
    std::int64_t min_steps = 20, max_steps = 35;
    double e_toy = 1.0;  // toy constitutive scale: stress = e_toy * strain
    labels::TimingOrientation orientation = labels::TimingOrientation::continuity;
};

class ForgingGeometry;

// Snapshot of the cross-section at deformation progress theta of one
// sub-process (stage is 0-based). (stage k, theta 1) and (stage k+1, theta 0)
// describe the same shape.
struct ProfileFunction {
    const ForgingGeometry* geometry = nullptr;
    int stage = 0;
    double theta = 0.0;
    double height = 0.0;
    double c_theta = 1.0;  // volume-conserving bulge normalization

    double radius(double y) const;
};

class ForgingGeometry {
public:
    ForgingGeometry(InitialProfile initial, std::vector<StageSpec> stages, std::int64_t image_size,
                    double e_toy = 1.0);
    static ForgingGeometry random(std::uint64_t seed, const SimParams& params);

    int stages() const { return static_cast<int>(stages_.size()); }
    const StageSpec& stage(int k) const { return stages_.at(static_cast<std::size_t>(k)); }
    std::int64_t image_size() const { return image_size_; }
    double e_toy() const { return e_toy_; }

    ProfileFunction profile(int stage, double theta) const;

    double base_height(int stage) const;          // height at stage start
    double base_radius(int stage, double y) const;  // profile at stage start

    struct PointState {
        double r = 0.0, y = 0.0;
        double eps_r = 0.0, eps_y = 0.0;  // accumulated logarithmic strains
    };
    // Map an initial material point to its position at `to`, accumulating
    // strains along the way.
    PointState push_forward(double r0, double y0, const ProfileFunction& to) const;
    // Inverse: material point at `at` back to initial coordinates.
    PointState pull_back(const ProfileFunction& at, double r, double y) const;

private:
    double rho_at(int stage, double theta) const;
    double bulge_q(int stage, double y_frac) const;
    double g_factor(int stage, double theta, double c_theta, double y_base) const;
    double compute_c(int stage, double theta) const;

    InitialProfile initial_;
    std::vector<StageSpec> stages_;
    std::vector<double> base_heights_;  // per stage start + final
    std::vector<double> c_full_;        // c at theta=1 per stage
    std::int64_t image_size_;
    double e_toy_;

    friend struct ProfileFunction;
};

struct Frame {
    ag::Tensor<float> channels;  // [5,S,S]: shape, radial stress, axial stress, radial strain, axial strain
    labels::TimingLabel timing;
    std::int64_t step_index = 0;  // global step within the process
};

struct ForgingProcess {
    std::vector<Frame> frames;             // unique frames; boundaries shared between sub-processes
    std::vector<std::int64_t> boundaries;  // N+1 global indices: starts of each sub-process, then last frame
    std::uint64_t seed = 0;
    std::int64_t image_size = 64;
    int sub_processes = 3;
    bool normalized = false;

    // Inclusive frame range of sub-process k (0-based); ranges overlap on the
    // shared boundary frames.
    std::pair<std::int64_t, std::int64_t> sub_process_range(int k) const;
    std::int64_t total_steps() const { return boundaries.empty() ? 0 : boundaries.back(); }
};

// Binary half cross-section: pixel (x,y) is 255 when the pixel center lies
// inside the profile. Row 0 is the bottom of the billet.
ag::Tensor<float> rasterize_profile(const ProfileFunction& profile);

// Same raster rule for an arbitrary radius-over-height description.
template <typename RadiusFn>
ag::Tensor<float> rasterize_radius_fn(RadiusFn&& radius, double height, std::int64_t image_size);

// Incremental radial/axial strain (and toy stress) fields between two
// snapshots of the same geometry. Values are rasterized by pushing material
// samples forward; colliding samples keep the largest-magnitude value, and
// covered pixels that received no sample fall back to the exact inverse map.
ag::Tensor<float> compute_physics_channels(const ProfileFunction& before, const ProfileFunction& after);

// Max-|value| deposit of scattered samples onto a [S,S] grid; exposed for
// collision tests.
void deposit_max_abs(const std::vector<double>& r, const std::vector<double>& y,
                     const std::vector<double>& value, ag::Tensor<float>& grid);

// Solid-of-revolution volume of a binary cross-section: column x spans the
// radius band [x, x+1), so each white pixel contributes pi * (2x + 1).
// Accepts {0,255} raw or {-1,1} normalized images.
double solid_volume(const ag::Tensor<float>& shape);

ForgingProcess generate_process(std::uint64_t seed, const SimParams& params);

// Generation from an explicit geometry (fixed deformation parameters).
ForgingProcess generate_from_geometry(const ForgingGeometry& geometry, std::uint64_t seed,
                                      const SimParams& params);

struct NormalizationStats {
    std::array<double, 4> clip{1.0, 1.0, 1.0, 1.0};  // per physics channel, 99.7th |value| percentile
};

// Clip threshold per physics channel over the training split (99.7th
// percentile of |values| on material pixels).
NormalizationStats compute_normalization(const std::vector<ForgingProcess>& train_split);

// In place: shape channel 0/255 -> -1/+1, physics channels clipped to
// [-clip, clip] and scaled to [-1, 1].
void apply_normalization(ForgingProcess& process, const NormalizationStats& stats);

template <typename RadiusFn>
ag::Tensor<float> rasterize_radius_fn(RadiusFn&& radius, double height, std::int64_t image_size) {
    const auto s = image_size;
    if (height >= static_cast<double>(s) - 1.0)
        throw_invalid("rasterize: profile height leaves the raster");
    std::vector<float> img(static_cast<std::size_t>(s * s), 0.0f);
    for (std::int64_t row = 0; row < s; ++row) {
        const double y = static_cast<double>(row) + 0.5;
        if (y >= height) break;
        const double rad = radius(y);
        if (rad >= static_cast<double>(s) - 1.0)
            throw_invalid("rasterize: profile radius leaves the raster");
        const auto cols = static_cast<std::int64_t>(std::max(0.0, std::ceil(rad - 0.5)));
        for (std::int64_t x = 0; x < cols && x < s; ++x) img[static_cast<std::size_t>(row * s + x)] = 255.0f;
    }
    return ag::Tensor<float>::from_data({s, s}, std::move(img));
}

}  // namespace pctgan::sim
