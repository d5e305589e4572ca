#include "pctgan/nn.hpp"

#include <cmath>

namespace pctgan::nn {

// ---- batch norm -------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       RunningStats<T>* stats, bool train, T momentum, T eps) {
    if (x.rank() != 4) throw_invalid("batch_norm2d: input must be rank-4, got " + ag::shape_str(x.shape()));
    const auto c = x.dim(1);
    if (gamma.numel() != c || beta.numel() != c)
        throw_invalid("batch_norm2d: gamma/beta must have " + std::to_string(c) + " entries");
    const auto n = x.dim(0) * x.dim(2) * x.dim(3);
    if (n < 1) throw_invalid("batch_norm2d: empty batch");

    const Shape cshape{1, c, 1, 1};
    auto g4 = ag::reshape(gamma, cshape);
    auto b4 = ag::reshape(beta, cshape);

    if (!train) {
        if (stats == nullptr || !stats->populated)
            throw_state("batch_norm2d: eval mode requires populated running stats");
        auto rm = ag::reshape(stats->mean, cshape);
        auto rv = ag::reshape(stats->var, cshape);
        auto inv = ag::recip(ag::sqrt(ag::add_scalar(rv, eps)));
        return ag::add(ag::mul(ag::mul(ag::sub(x, rm), inv), g4), b4);
    }

    const T inv_n = T(1) / static_cast<T>(n);
    auto mu = ag::scale(ag::sum_to(x, cshape), inv_n);
    auto centered = ag::sub(x, mu);
    auto var = ag::scale(ag::sum_to(ag::square(centered), cshape), inv_n);
    auto inv = ag::recip(ag::sqrt(ag::add_scalar(var, eps)));
    auto y = ag::add(ag::mul(ag::mul(centered, inv), g4), b4);

    if (stats != nullptr) {
        ag::NoGradGuard ng;
        if (!stats->mean.defined()) {
            stats->mean = Tensor<T>::zeros({c});
            stats->var = Tensor<T>::full({c}, T(1));
        }
        // EMA with the unbiased batch variance, matching common framework
        // semantics.
        const T unbias = n > 1 ? static_cast<T>(n) / static_cast<T>(n - 1) : T(1);
        auto rm = stats->mean.mutable_data();
        auto rv = stats->var.mutable_data();
        const auto mud = mu.data();
        const auto vard = var.data();
        for (std::int64_t i = 0; i < c; ++i) {
            rm[i] = (T(1) - momentum) * rm[i] + momentum * mud[i];
            rv[i] = (T(1) - momentum) * rv[i] + momentum * vard[i] * unbias;
        }
        stats->populated = true;
    }
    return y;
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels) {
    gamma = Tensor<T>::full({channels}, T(1), true);
    beta = Tensor<T>::zeros({channels}, true);
    stats.mean = Tensor<T>::zeros({channels});
    stats.var = Tensor<T>::full({channels}, T(1));
    // (0,1) defaults are valid eval-mode statistics; prediction from an
    // untrained checkpoint stays well-defined.
    stats.populated = true;
}

// ---- spectral norm ----------------------------------------------------------

namespace {

template <typename T>
void matvec(const T* m, std::int64_t rows, std::int64_t cols, const T* x, T* y, bool transposed) {
    if (!transposed) {
        for (std::int64_t i = 0; i < rows; ++i) {
            T acc = T(0);
            const T* row = m + i * cols;
            for (std::int64_t j = 0; j < cols; ++j) acc += row[j] * x[j];
            y[i] = acc;
        }
    } else {
        for (std::int64_t j = 0; j < cols; ++j) y[j] = T(0);
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* row = m + i * cols;
            const T xi = x[i];
            for (std::int64_t j = 0; j < cols; ++j) y[j] += row[j] * xi;
        }
    }
}

template <typename T>
T normalize_vec(std::vector<T>& v) {
    T nrm = T(0);
    for (auto x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    const T denom = nrm > T(1e-12) ? nrm : T(1e-12);
    for (auto& x : v) x /= denom;
    return nrm;
}

}  // namespace

template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& weight, SpectralState<T>& state, int n_power_iters,
                             bool update_state) {
    if (!weight.defined() || weight.rank() < 1) throw_invalid("spectral_normalize: undefined weight");
    if (n_power_iters < 1 && update_state) throw_invalid("spectral_normalize: need at least one power iteration");
    const auto rows = weight.dim(0);
    const auto cols = weight.numel() / rows;
    const T* w = weight.data().data();

    if (!state.u.defined()) {
        // deterministic unit start; power iterations rotate it toward the
        // leading singular vector
        std::vector<T> u0(static_cast<std::size_t>(rows));
        Rng r(0x5eedu + static_cast<std::uint64_t>(rows) * 1315423911ULL +
              static_cast<std::uint64_t>(cols));
        for (auto& x : u0) x = static_cast<T>(r.normal());
        normalize_vec(u0);
        state.u = Tensor<T>::from_data({rows}, std::move(u0));
    }

    std::vector<T> u(state.u.data().begin(), state.u.data().end());
    std::vector<T> v(static_cast<std::size_t>(cols));
    const int iters = update_state ? n_power_iters : std::max(1, n_power_iters);
    for (int it = 0; it < iters; ++it) {
        matvec(w, rows, cols, u.data(), v.data(), true);
        normalize_vec(v);
        matvec(w, rows, cols, v.data(), u.data(), false);
        normalize_vec(u);
    }
    // sigma = u^T W v
    std::vector<T> wv(static_cast<std::size_t>(rows));
    matvec(w, rows, cols, v.data(), wv.data(), false);
    T sigma = T(0);
    for (std::int64_t i = 0; i < rows; ++i) sigma += u[i] * wv[i];
    if (!(sigma > T(0)) || !std::isfinite(static_cast<double>(sigma)))
        throw_invalid("spectral_normalize: degenerate weight matrix (sigma estimate " +
                      std::to_string(static_cast<double>(sigma)) + ")");
    if (update_state) {
        auto su = state.u.mutable_data();
        for (std::int64_t i = 0; i < rows; ++i) su[i] = u[i];
    }
    state.last_sigma = sigma;
    // sigma is a constant of the differentiation
    return ag::scale(weight, T(1) / sigma);
}

// ---- layers ------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::int64_t in_ch, std::int64_t out_ch, IntPair kernel, IntPair s, IntPair p, Rng& rng,
                  T init_std)
    : stride(s), pad(p) {
    weight = Tensor<T>::randn({out_ch, in_ch, kernel.first, kernel.second}, rng, init_std, true);
    bias = Tensor<T>::zeros({out_ch}, true);
}

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(std::int64_t in_ch, std::int64_t out_ch, IntPair kernel, IntPair s,
                                    IntPair p, Rng& rng, T init_std)
    : stride(s), pad(p) {
    weight = Tensor<T>::randn({in_ch, out_ch, kernel.first, kernel.second}, rng, init_std, true);
    bias = Tensor<T>::zeros({out_ch}, true);
}

template <typename T>
Linear<T>::Linear(std::int64_t in_features, std::int64_t out_features, Rng& rng, T init_std) {
    weight = Tensor<T>::randn({out_features, in_features}, rng, init_std, true);
    bias = Tensor<T>::zeros({out_features}, true);
}

template <typename T>
Tensor<T> global_sum_pool(const Tensor<T>& x) {
    if (x.rank() != 4) throw_invalid("global_sum_pool: input must be rank-4");
    return ag::reshape(ag::sum_to(x, Shape{x.dim(0), x.dim(1), 1, 1}), Shape{x.dim(0), x.dim(1)});
}

// ---- Adam ---------------------------------------------------------------------

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, T lr, T beta1, T beta2, T eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(params_[i].numel()), T(0));
        v_[i].assign(static_cast<std::size_t>(params_[i].numel()), T(0));
    }
}

template <typename T>
void Adam<T>::step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        auto g = p.grad();
        if (!g.defined()) continue;  // zero gradient: moments decay to zero updates anyway
        if (g.shape() != p.shape())
            throw_invalid("adam: gradient shape " + ag::shape_str(g.shape()) + " != parameter shape " +
                          ag::shape_str(p.shape()));
        auto pd = p.mutable_data();
        const auto gd = g.data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < pd.size(); ++k) {
            m[k] = beta1_ * m[k] + (T(1) - beta1_) * gd[k];
            v[k] = beta2_ * v[k] + (T(1) - beta2_) * gd[k] * gd[k];
            const T mhat = m[k] / bc1;
            const T vhat = v[k] / bc2;
            pd[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

template <typename T>
void Adam<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

// ---- instantiations -------------------------------------------------------------

#define PCTGAN_INSTANTIATE_NN(T)                                                                         \
    template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                       RunningStats<T>*, bool, T, T);                                    \
    template class BatchNorm2d<T>;                                                                       \
    template Tensor<T> spectral_normalize<T>(const Tensor<T>&, SpectralState<T>&, int, bool);            \
    template class Conv2d<T>;                                                                            \
    template class ConvTranspose2d<T>;                                                                   \
    template class Linear<T>;                                                                            \
    template Tensor<T> global_sum_pool<T>(const Tensor<T>&);                                             \
    template class Adam<T>;

PCTGAN_INSTANTIATE_NN(float)
PCTGAN_INSTANTIATE_NN(double)

#undef PCTGAN_INSTANTIATE_NN

}  // namespace pctgan::nn
