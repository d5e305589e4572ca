#pragma once

#include <string>
#include <vector>

#include "pctgan/autograd.hpp"

namespace pctgan::nn {

using ag::IntPair;
using ag::Shape;
using ag::Tensor;

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

// ---- batch normalization -------------------------------------------------

template <typename T>
struct RunningStats {
    Tensor<T> mean;  // [C]
    Tensor<T> var;   // [C]
    bool populated = false;
};

// Train mode normalizes with batch statistics and folds them into the running
// stats by EMA; eval mode requires populated running stats.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       RunningStats<T>* stats, bool train, T momentum = T(0.1), T eps = T(1e-5));

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(std::int64_t channels);

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        return batch_norm2d(x, gamma, beta, &stats, train, momentum, eps);
    }

    Tensor<T> gamma, beta;
    RunningStats<T> stats;
    T momentum = T(0.1);
    T eps = T(1e-5);
};

// ---- spectral normalization ------------------------------------------------

// Persistent left singular-vector estimate for one weight, viewed as the
// matrix [first extent, rest].
template <typename T>
struct SpectralState {
    Tensor<T> u;          // [rows], unit norm
    T last_sigma = T(0);  // estimate from the most recent apply
};

// weight / sigma_hat with sigma_hat held constant for differentiation.
// update_state=false recomputes sigma from the stored u without writing back
// (eval-mode behaviour).
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& weight, SpectralState<T>& state, int n_power_iters,
                             bool update_state = true);

// ---- layers ----------------------------------------------------------------

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::int64_t in_ch, std::int64_t out_ch, IntPair kernel, IntPair stride, IntPair pad, Rng& rng,
           T init_std = T(0.02));
    Tensor<T> forward(const Tensor<T>& x) const { return ag::conv2d(x, weight, bias, stride, pad); }

    Tensor<T> weight;  // [out,in,kh,kw]
    Tensor<T> bias;    // [out]
    IntPair stride{1, 1}, pad{0, 0};
};

template <typename T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(std::int64_t in_ch, std::int64_t out_ch, IntPair kernel, IntPair stride, IntPair pad,
                    Rng& rng, T init_std = T(0.02));
    Tensor<T> forward(const Tensor<T>& x) const { return ag::conv_transpose2d(x, weight, bias, stride, pad); }

    Tensor<T> weight;  // [in,out,kh,kw]
    Tensor<T> bias;    // [out]
    IntPair stride{1, 1}, pad{0, 0};
};

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(std::int64_t in_features, std::int64_t out_features, Rng& rng, T init_std = T(0.02));
    Tensor<T> forward(const Tensor<T>& x) const { return ag::linear(x, weight, bias); }

    Tensor<T> weight;  // [out,in]
    Tensor<T> bias;    // [out]
};

// [B,C,H,W] -> [B,C]
template <typename T>
Tensor<T> global_sum_pool(const Tensor<T>& x);

// ---- optimizer --------------------------------------------------------------

// Bias-corrected Adam over a fixed parameter list. Moment buffers live here;
// step() consumes and leaves .grad fields untouched (call zero_grad between
// iterations).
template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Tensor<T>> params, T lr, T beta1, T beta2, T eps = T(1e-8));

    void step();
    void zero_grad();

    std::vector<Tensor<T>>& params() { return params_; }
    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }
    std::int64_t step_count() const { return t_; }

    // checkpoint access
    std::vector<T>& moment1(std::size_t i) { return m_[i]; }
    std::vector<T>& moment2(std::size_t i) { return v_[i]; }
    void set_step_count(std::int64_t t) { t_ = t; }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_, v_;
    T lr_ = T(0), beta1_ = T(0.5), beta2_ = T(0.9), eps_ = T(1e-8);
    std::int64_t t_ = 0;
};

}  // namespace pctgan::nn
