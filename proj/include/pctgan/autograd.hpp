#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pctgan/tensor.hpp"

// Differentiable primitives over ag::Tensor. Every VJP is itself built from
// these primitives, so gradients computed with create_graph=true carry a
// computation record and can be differentiated again (the second-order path
// needed by the gradient penalty).

namespace pctgan::ag {

using IntPair = std::pair<std::int64_t, std::int64_t>;

// ---- elementwise / broadcast ----
// Binary ops broadcast between same-rank shapes where each extent matches or
// is 1 on either side.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T c);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T c);
template <typename T> Tensor<T> recip(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);

// ---- activations ----
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <typename T> Tensor<T> tanh(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);  // rank-2
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t len);
template <typename T> Tensor<T> pad_slice(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t full_extent);

// ---- reductions / broadcasts ----
// target shape: same rank, each extent equal or 1 (summed out).
template <typename T> Tensor<T> sum_to(const Tensor<T>& x, Shape target);
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& x, Shape target);
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);   // -> [1]
template <typename T> Tensor<T> mean_all(const Tensor<T>& x);  // -> [1]

// ---- linear algebra ----
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// y = x @ w^T + b with x:[B,in], w:[out,in], b:[out]
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---- convolution ----
// x:[B,Cin,H,W], w:[Cout,Cin,kH,kW] -> [B,Cout,H',W'],
// H' = (H + 2*pad - kH)/stride + 1 (floor).
template <typename T>
Tensor<T> conv2d_nobias(const Tensor<T>& x, const Tensor<T>& w, IntPair stride, IntPair pad);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, IntPair stride, IntPair pad);
// Adjoint of conv2d w.r.t. its input; also the forward map of the transposed
// convolution. gy:[B,Cout,H',W'], w:[Cout,Cin,kH,kW] -> [B,Cin,H,W].
template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, IntPair stride, IntPair pad,
                            std::int64_t out_h, std::int64_t out_w);
// x:[B,Cin,H,W], gy:[B,Cout,H',W'] -> [Cout,Cin,kH,kW].
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, IntPair stride, IntPair pad,
                             std::int64_t kh, std::int64_t kw);
// x:[B,Cin,H,W], w:[Cin,Cout,kH,kW] -> [B,Cout,H'',W''],
// H'' = (H-1)*stride - 2*pad + kH.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, IntPair stride, IntPair pad);

// ---- gather / scatter over channels ----
// idx: row-major [B][n_sel] channel indices (0-based) into x's channel axis.
template <typename T>
Tensor<T> select_channels(const Tensor<T>& x, const std::vector<std::int64_t>& idx, std::int64_t n_sel);
template <typename T>
Tensor<T> scatter_channels(const Tensor<T>& g, const std::vector<std::int64_t>& idx, std::int64_t channels);

// ---- engine ----
template <typename T>
struct GradResult {
    std::vector<Tensor<T>> grads;  // aligned with the inputs argument
    bool disconnected = false;     // no differentiable path from output to any input
};

// d(output)/d(inputs). output must be a single element. When create_graph is
// set the returned gradients carry their own computation record. Nothing is
// accumulated into .grad fields.
template <typename T>
GradResult<T> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs, bool create_graph);

// Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf.
// Returns true when the loss is detached from all such leaves (warning case).
template <typename T>
bool backward(const Tensor<T>& loss, bool create_graph = false);

// Per-batch-element L2 norm of d(scorer)/d(x_hat). scorer(x_hat) must yield
// one score per batch element. The result still carries a computation record,
// so penalties built from it can be differentiated w.r.t. the scorer's
// parameters (the second-order path of the gradient penalty).
template <typename T, typename Scorer>
Tensor<T> input_gradient_norm(Scorer&& scorer, const Tensor<T>& x_hat) {
    if (!x_hat.defined() || x_hat.rank() < 1) throw_invalid("input_gradient_norm: undefined x_hat");
    if (!x_hat.requires_grad() || x_hat.producer())
        throw_invalid("input_gradient_norm: x_hat must be a requires_grad leaf");
    Tensor<T> scores = scorer(x_hat);
    const auto batch = x_hat.dim(0);
    if (!scores.defined() || scores.numel() != batch || scores.dim(0) != batch)
        throw_invalid("input_gradient_norm: scorer must return one score per batch element");
    auto g = grad(sum_all(scores), {x_hat}, /*create_graph=*/true).grads[0];
    Shape target(g.rank(), 1);
    target[0] = batch;
    auto norms_sq = sum_to(square(g), std::move(target));
    return reshape(sqrt(norms_sq), Shape{batch});
}

}  // namespace pctgan::ag
