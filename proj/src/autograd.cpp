#include "pctgan/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include "pctgan/gemm.hpp"

namespace pctgan::ag {

std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        if (e <= 0) throw_invalid("shape extent must be positive, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {
thread_local bool g_recording = true;
}

bool grad_recording_enabled() { return g_recording; }
void set_grad_recording(bool enabled) { g_recording = enabled; }

namespace {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
    if (!g_recording) return false;
    for (const auto* in : inputs)
        if (in->defined() && in->requires_grad()) return true;
    return false;
}

template <typename T, typename Op>
Tensor<T> attach(Shape shape, std::vector<T> data, std::shared_ptr<Op> op) {
    auto t = Tensor<T>::from_data(std::move(shape), std::move(data));
    t.node()->requires_grad = true;
    t.node()->producer = std::static_pointer_cast<OpNode<T>>(std::move(op));
    return t;
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* opname) {
    if (a.size() != b.size())
        throw_invalid(std::string(opname) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1)
            out[i] = a[i];
        else if (a[i] == 1)
            out[i] = b[i];
        else
            throw_invalid(std::string(opname) + ": dim " + std::to_string(i) + " mismatch " + shape_str(a) +
                          " vs " + shape_str(b));
    }
    return out;
}

// Elementwise binary with broadcasting; fast paths for identical shapes and
// scalar operands, odometer walk otherwise.
template <typename T, typename F>
std::vector<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, const Shape& out_shape, F&& f) {
    const auto n = numel_of(out_shape);
    std::vector<T> out(static_cast<std::size_t>(n));
    const auto da = a.data();
    const auto db = b.data();
    if (a.shape() == b.shape()) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = f(da[i], db[i]);
        return out;
    }
    if (b.numel() == 1) {
        const T bv = db[0];
        for (std::int64_t i = 0; i < n; ++i) out[i] = f(da[i], bv);
        return out;
    }
    if (a.numel() == 1) {
        const T av = da[0];
        for (std::int64_t i = 0; i < n; ++i) out[i] = f(av, db[i]);
        return out;
    }
    const auto rank = out_shape.size();
    auto sa = row_major_strides(a.shape());
    auto sb = row_major_strides(b.shape());
    for (std::size_t i = 0; i < rank; ++i) {
        if (a.shape()[i] == 1) sa[i] = 0;
        if (b.shape()[i] == 1) sb[i] = 0;
    }
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = f(da[oa], db[ob]);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out_shape[d]) break;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    return out;
}

template <typename T, typename F>
std::vector<T> map_unary(const Tensor<T>& x, F&& f) {
    const auto d = x.data();
    std::vector<T> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = f(d[i]);
    return out;
}

template <typename T>
std::vector<T> sum_to_data(const Tensor<T>& x, const Shape& target) {
    if (x.shape().size() != target.size())
        throw_invalid("sum_to: rank mismatch " + shape_str(x.shape()) + " vs " + shape_str(target));
    for (std::size_t i = 0; i < target.size(); ++i)
        if (target[i] != x.shape()[i] && target[i] != 1)
            throw_invalid("sum_to: dim " + std::to_string(i) + " incompatible " + shape_str(x.shape()) +
                          " -> " + shape_str(target));
    std::vector<T> out(static_cast<std::size_t>(numel_of(target)), T(0));
    auto st = row_major_strides(target);
    for (std::size_t i = 0; i < target.size(); ++i)
        if (target[i] == 1) st[i] = 0;
    const auto& xs = x.shape();
    const auto rank = xs.size();
    std::vector<std::int64_t> idx(rank, 0);
    const auto dx = x.data();
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        out[off] += dx[i];
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            off += st[d];
            if (idx[d] < xs[d]) break;
            off -= st[d] * xs[d];
            idx[d] = 0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// op classes
// ---------------------------------------------------------------------------

template <typename T>
struct AddOp final : OpNode<T> {
    AddOp(const Tensor<T>& a, const Tensor<T>& b) : OpNode<T>("add") { this->inputs = {a, b}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {sum_to(ct, this->inputs[0].shape()), sum_to(ct, this->inputs[1].shape())};
    }
};

template <typename T>
struct MulOp final : OpNode<T> {
    MulOp(const Tensor<T>& a, const Tensor<T>& b) : OpNode<T>("mul") { this->inputs = {a, b}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        const auto& a = this->inputs[0];
        const auto& b = this->inputs[1];
        return {sum_to(mul(ct, b), a.shape()), sum_to(mul(ct, a), b.shape())};
    }
};

template <typename T>
struct NegOp final : OpNode<T> {
    explicit NegOp(const Tensor<T>& x) : OpNode<T>("neg") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override { return {neg(ct)}; }
};

template <typename T>
struct ScaleOp final : OpNode<T> {
    ScaleOp(const Tensor<T>& x, T c) : OpNode<T>("scale"), c_(c) { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override { return {scale(ct, c_)}; }
    T c_;
};

template <typename T>
struct AddScalarOp final : OpNode<T> {
    AddScalarOp(const Tensor<T>& x, T c) : OpNode<T>("add_scalar"), c_(c) { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override { return {ct}; }
    T c_;
};

template <typename T>
struct RecipOp final : OpNode<T> {
    explicit RecipOp(const Tensor<T>& x) : OpNode<T>("recip") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>& out) const override {
        return {neg(mul(ct, mul(out, out)))};
    }
};

template <typename T>
struct SqrtOp final : OpNode<T> {
    explicit SqrtOp(const Tensor<T>& x) : OpNode<T>("sqrt") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>& out) const override {
        return {scale(mul(ct, recip(out)), T(0.5))};
    }
};

template <typename T>
struct LeakyReluOp final : OpNode<T> {
    LeakyReluOp(const Tensor<T>& x, Tensor<T> mask) : OpNode<T>("leaky_relu"), mask_(std::move(mask)) {
        this->inputs = {x};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {mul(ct, mask_)};
    }
    Tensor<T> mask_;  // constant subgradient, no history
};

template <typename T>
struct TanhOp final : OpNode<T> {
    explicit TanhOp(const Tensor<T>& x) : OpNode<T>("tanh") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>& out) const override {
        return {mul(ct, add_scalar(neg(mul(out, out)), T(1)))};
    }
};

template <typename T>
struct SigmoidOp final : OpNode<T> {
    explicit SigmoidOp(const Tensor<T>& x) : OpNode<T>("sigmoid") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>& out) const override {
        return {mul(ct, mul(out, add_scalar(neg(out), T(1))))};
    }
};

template <typename T>
struct ReshapeOp final : OpNode<T> {
    explicit ReshapeOp(const Tensor<T>& x) : OpNode<T>("reshape") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {reshape(ct, this->inputs[0].shape())};
    }
};

template <typename T>
struct TransposeOp final : OpNode<T> {
    explicit TransposeOp(const Tensor<T>& x) : OpNode<T>("transpose") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override { return {transpose(ct)}; }
};

template <typename T>
struct ConcatOp final : OpNode<T> {
    ConcatOp(const std::vector<Tensor<T>>& parts, std::size_t axis) : OpNode<T>("concat"), axis_(axis) {
        this->inputs = parts;
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        std::vector<Tensor<T>> out;
        out.reserve(this->inputs.size());
        std::int64_t offset = 0;
        for (const auto& in : this->inputs) {
            const auto len = in.shape()[axis_];
            out.push_back(slice(ct, axis_, offset, len));
            offset += len;
        }
        return out;
    }
    std::size_t axis_;
};

template <typename T>
struct SliceOp final : OpNode<T> {
    SliceOp(const Tensor<T>& x, std::size_t axis, std::int64_t start) : OpNode<T>("slice"), axis_(axis), start_(start) {
        this->inputs = {x};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {pad_slice(ct, axis_, start_, this->inputs[0].shape()[axis_])};
    }
    std::size_t axis_;
    std::int64_t start_;
};

template <typename T>
struct PadSliceOp final : OpNode<T> {
    PadSliceOp(const Tensor<T>& x, std::size_t axis, std::int64_t start) : OpNode<T>("pad_slice"), axis_(axis), start_(start) {
        this->inputs = {x};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {slice(ct, axis_, start_, this->inputs[0].shape()[axis_])};
    }
    std::size_t axis_;
    std::int64_t start_;
};

template <typename T>
struct SumToOp final : OpNode<T> {
    explicit SumToOp(const Tensor<T>& x) : OpNode<T>("sum_to") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {broadcast_to(ct, this->inputs[0].shape())};
    }
};

template <typename T>
struct BroadcastToOp final : OpNode<T> {
    explicit BroadcastToOp(const Tensor<T>& x) : OpNode<T>("broadcast_to") { this->inputs = {x}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {sum_to(ct, this->inputs[0].shape())};
    }
};

template <typename T>
struct MatMulOp final : OpNode<T> {
    MatMulOp(const Tensor<T>& a, const Tensor<T>& b) : OpNode<T>("matmul") { this->inputs = {a, b}; }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        const auto& a = this->inputs[0];
        const auto& b = this->inputs[1];
        return {matmul(ct, transpose(b)), matmul(transpose(a), ct)};
    }
};

template <typename T>
struct ConvOp final : OpNode<T> {
    ConvOp(const Tensor<T>& x, const Tensor<T>& w, IntPair stride, IntPair pad)
        : OpNode<T>("conv2d"), stride_(stride), pad_(pad) {
        this->inputs = {x, w};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        const auto& x = this->inputs[0];
        const auto& w = this->inputs[1];
        return {conv2d_input_grad(ct, w, stride_, pad_, x.dim(2), x.dim(3)),
                conv2d_weight_grad(x, ct, stride_, pad_, w.dim(2), w.dim(3))};
    }
    IntPair stride_, pad_;
};

template <typename T>
struct ConvDxOp final : OpNode<T> {
    ConvDxOp(const Tensor<T>& gy, const Tensor<T>& w, IntPair stride, IntPair pad)
        : OpNode<T>("conv2d_input_grad"), stride_(stride), pad_(pad) {
        this->inputs = {gy, w};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        const auto& gy = this->inputs[0];
        const auto& w = this->inputs[1];
        return {conv2d_nobias(ct, w, stride_, pad_),
                conv2d_weight_grad(ct, gy, stride_, pad_, w.dim(2), w.dim(3))};
    }
    IntPair stride_, pad_;
};

template <typename T>
struct ConvDwOp final : OpNode<T> {
    ConvDwOp(const Tensor<T>& x, const Tensor<T>& gy, IntPair stride, IntPair pad)
        : OpNode<T>("conv2d_weight_grad"), stride_(stride), pad_(pad) {
        this->inputs = {x, gy};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        const auto& x = this->inputs[0];
        const auto& gy = this->inputs[1];
        return {conv2d_input_grad(gy, ct, stride_, pad_, x.dim(2), x.dim(3)), conv2d_nobias(x, ct, stride_, pad_)};
    }
    IntPair stride_, pad_;
};

template <typename T>
struct SelectChannelsOp final : OpNode<T> {
    SelectChannelsOp(const Tensor<T>& x, std::vector<std::int64_t> idx, std::int64_t n_sel)
        : OpNode<T>("select_channels"), idx_(std::move(idx)), n_sel_(n_sel) {
        this->inputs = {x};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {scatter_channels(ct, idx_, this->inputs[0].dim(1))};
    }
    std::vector<std::int64_t> idx_;
    std::int64_t n_sel_;
};

template <typename T>
struct ScatterChannelsOp final : OpNode<T> {
    ScatterChannelsOp(const Tensor<T>& g, std::vector<std::int64_t> idx, std::int64_t channels)
        : OpNode<T>("scatter_channels"), idx_(std::move(idx)), channels_(channels) {
        this->inputs = {g};
    }
    std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>&) const override {
        return {select_channels(ct, idx_, this->inputs[0].dim(1))};
    }
    std::vector<std::int64_t> idx_;
    std::int64_t channels_;
};

}  // namespace

// ---------------------------------------------------------------------------
// free functions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto shape = broadcast_shape(a.shape(), b.shape(), "add");
    auto data = broadcast_binary(a, b, shape, [](T x, T y) { return x + y; });
    if (!should_record<T>({&a, &b})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<AddOp<T>>(a, b));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto shape = broadcast_shape(a.shape(), b.shape(), "mul");
    auto data = broadcast_binary(a, b, shape, [](T x, T y) { return x * y; });
    if (!should_record<T>({&a, &b})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<MulOp<T>>(a, b));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, neg(b));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    auto data = map_unary(x, [](T v) { return -v; });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    return attach(x.shape(), std::move(data), std::make_shared<NegOp<T>>(x));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    auto data = map_unary(x, [c](T v) { return c * v; });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    return attach(x.shape(), std::move(data), std::make_shared<ScaleOp<T>>(x, c));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    auto data = map_unary(x, [c](T v) { return v + c; });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    return attach(x.shape(), std::move(data), std::make_shared<AddScalarOp<T>>(x, c));
}

template <typename T>
Tensor<T> recip(const Tensor<T>& x) {
    auto data = map_unary(x, [](T v) { return T(1) / v; });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    return attach(x.shape(), std::move(data), std::make_shared<RecipOp<T>>(x));
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    auto data = map_unary(x, [](T v) { return std::sqrt(v); });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    return attach(x.shape(), std::move(data), std::make_shared<SqrtOp<T>>(x));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return mul(x, x);
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    if (!(slope > T(0) && slope < T(1))) throw_invalid("leaky_relu: slope must lie in (0,1)");
    auto data = map_unary(x, [slope](T v) { return v > T(0) ? v : slope * v; });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    auto mask = map_unary(x, [slope](T v) { return v > T(0) ? T(1) : slope; });
    auto mask_t = Tensor<T>::from_data(x.shape(), std::move(mask));
    return attach(x.shape(), std::move(data), std::make_shared<LeakyReluOp<T>>(x, std::move(mask_t)));
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    auto data = map_unary(x, [](T v) { return std::tanh(v); });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    return attach(x.shape(), std::move(data), std::make_shared<TanhOp<T>>(x));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    auto data = map_unary(x, [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(x.shape(), std::move(data));
    return attach(x.shape(), std::move(data), std::make_shared<SigmoidOp<T>>(x));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw_invalid("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<T> data(x.data().begin(), x.data().end());
    if (!should_record<T>({&x})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<ReshapeOp<T>>(x));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw_invalid("transpose: expected rank-2, got " + shape_str(x.shape()));
    const auto r = x.dim(0), c = x.dim(1);
    std::vector<T> data(static_cast<std::size_t>(r * c));
    const auto dx = x.data();
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) data[j * r + i] = dx[i * c + j];
    Shape shape{c, r};
    if (!should_record<T>({&x})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<TransposeOp<T>>(x));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw_invalid("concat: no inputs");
    const auto& first = parts.front().shape();
    if (axis >= first.size()) throw_invalid("concat: axis out of range");
    Shape shape = first;
    std::int64_t total = first[axis];
    for (std::size_t p = 1; p < parts.size(); ++p) {
        const auto& s = parts[p].shape();
        if (s.size() != first.size()) throw_invalid("concat: rank mismatch at input " + std::to_string(p));
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != first[d])
                throw_invalid("concat: dim " + std::to_string(d) + " mismatch at input " + std::to_string(p));
        total += s[axis];
    }
    shape[axis] = total;

    // outer x axis x inner layout
    std::int64_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    std::vector<T> data(static_cast<std::size_t>(numel_of(shape)));
    std::int64_t axis_off = 0;
    for (const auto& part : parts) {
        const auto len = part.shape()[axis];
        const auto dp = part.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = dp.data() + o * len * inner;
            T* dst = data.data() + (o * total + axis_off) * inner;
            std::copy(src, src + len * inner, dst);
        }
        axis_off += len;
    }
    bool record = false;
    if (g_recording)
        for (const auto& p : parts)
            if (p.requires_grad()) record = true;
    if (!record) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<ConcatOp<T>>(parts, axis));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t len) {
    if (axis >= x.rank()) throw_invalid("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > x.shape()[axis])
        throw_invalid("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") outside extent " + std::to_string(x.shape()[axis]));
    Shape shape = x.shape();
    shape[axis] = len;
    std::int64_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape()[d];
    const auto full = x.shape()[axis];
    std::vector<T> data(static_cast<std::size_t>(numel_of(shape)));
    const auto dx = x.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = dx.data() + (o * full + start) * inner;
        std::copy(src, src + len * inner, data.data() + o * len * inner);
    }
    if (!should_record<T>({&x})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<SliceOp<T>>(x, axis, start));
}

template <typename T>
Tensor<T> pad_slice(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t full_extent) {
    if (axis >= x.rank()) throw_invalid("pad_slice: axis out of range");
    const auto len = x.shape()[axis];
    if (start < 0 || start + len > full_extent) throw_invalid("pad_slice: slice does not fit target extent");
    Shape shape = x.shape();
    shape[axis] = full_extent;
    std::int64_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape()[d];
    std::vector<T> data(static_cast<std::size_t>(numel_of(shape)), T(0));
    const auto dx = x.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = dx.data() + o * len * inner;
        std::copy(src, src + len * inner, data.data() + (o * full_extent + start) * inner);
    }
    if (!should_record<T>({&x})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<PadSliceOp<T>>(x, axis, start));
}

template <typename T>
Tensor<T> sum_to(const Tensor<T>& x, Shape target) {
    if (x.shape() == target) return x;
    auto data = sum_to_data(x, target);
    if (!should_record<T>({&x})) return Tensor<T>::from_data(std::move(target), std::move(data));
    return attach(std::move(target), std::move(data), std::make_shared<SumToOp<T>>(x));
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, Shape target) {
    if (x.shape() == target) return x;
    auto bshape = broadcast_shape(x.shape(), target, "broadcast_to");
    if (bshape != target) throw_invalid("broadcast_to: " + shape_str(x.shape()) + " -> " + shape_str(target));
    auto ones = Tensor<T>::full(target, T(1));
    auto data = broadcast_binary(ones, x, target, [](T, T v) { return v; });
    if (!should_record<T>({&x})) return Tensor<T>::from_data(std::move(target), std::move(data));
    return attach(std::move(target), std::move(data), std::make_shared<BroadcastToOp<T>>(x));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Shape ones(x.rank(), 1);
    return reshape(sum_to(x, ones), Shape{1});
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw_invalid("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw_invalid("matmul: inner dim mismatch " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> data(static_cast<std::size_t>(m * n));
    detail::gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), data.data(), n);
    Shape shape{m, n};
    if (!should_record<T>({&a, &b})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<MatMulOp<T>>(a, b));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw_invalid("linear: x " + shape_str(x.shape()) + " incompatible with w " + shape_str(w.shape()));
    auto y = matmul(x, transpose(w));
    if (!b.defined()) return y;
    if (b.numel() != w.dim(0)) throw_invalid("linear: bias size " + std::to_string(b.numel()) + " != out features");
    return add(y, reshape(b, Shape{1, w.dim(0)}));
}

// ---------------------------------------------------------------------------
// convolution kernels (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
    std::int64_t batch, c_in, h, w;
    std::int64_t c_out, kh, kw;
    std::int64_t sh, sw, ph, pw;
    std::int64_t oh, ow;
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, IntPair stride, IntPair pad, const char* opname) {
    if (x.rank() != 4) throw_invalid(std::string(opname) + ": input must be rank-4, got " + shape_str(x.shape()));
    if (w.rank() != 4) throw_invalid(std::string(opname) + ": weight must be rank-4, got " + shape_str(w.shape()));
    ConvGeom g{};
    g.batch = x.dim(0);
    g.c_in = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.c_out = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.sh = stride.first;
    g.sw = stride.second;
    g.ph = pad.first;
    g.pw = pad.second;
    if (g.sh < 1 || g.sw < 1) throw_invalid(std::string(opname) + ": stride must be >= 1");
    if (g.ph < 0 || g.pw < 0) throw_invalid(std::string(opname) + ": padding must be >= 0");
    if (w.dim(1) != g.c_in)
        throw_invalid(std::string(opname) + ": weight in-channels " + std::to_string(w.dim(1)) +
                      " != input channels " + std::to_string(g.c_in));
    if (g.kh > g.h + 2 * g.ph || g.kw > g.w + 2 * g.pw)
        throw_invalid(std::string(opname) + ": kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                      " exceeds padded input " + std::to_string(g.h + 2 * g.ph) + "x" +
                      std::to_string(g.w + 2 * g.pw));
    g.oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
    g.ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
    return g;
}

// col layout: [c_in*kh*kw, oh*ow]
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const auto plane = g.h * g.w;
    for (std::int64_t c = 0; c < g.c_in; ++c) {
        const T* xc = x + c * plane;
        for (std::int64_t u = 0; u < g.kh; ++u) {
            for (std::int64_t v = 0; v < g.kw; ++v) {
                T* crow = col + ((c * g.kh + u) * g.kw + v) * (g.oh * g.ow);
                for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                    const std::int64_t ih = oh * g.sh - g.ph + u;
                    T* dst = crow + oh * g.ow;
                    if (ih < 0 || ih >= g.h) {
                        std::fill(dst, dst + g.ow, T(0));
                        continue;
                    }
                    const T* src = xc + ih * g.w;
                    for (std::int64_t ow = 0; ow < g.ow; ++ow) {
                        const std::int64_t iw = ow * g.sw - g.pw + v;
                        dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

// scatter-add of col layout back into an image
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
    const auto plane = g.h * g.w;
    for (std::int64_t c = 0; c < g.c_in; ++c) {
        T* xc = x + c * plane;
        for (std::int64_t u = 0; u < g.kh; ++u) {
            for (std::int64_t v = 0; v < g.kw; ++v) {
                const T* crow = col + ((c * g.kh + u) * g.kw + v) * (g.oh * g.ow);
                for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                    const std::int64_t ih = oh * g.sh - g.ph + u;
                    if (ih < 0 || ih >= g.h) continue;
                    const T* src = crow + oh * g.ow;
                    T* dst = xc + ih * g.w;
                    for (std::int64_t ow = 0; ow < g.ow; ++ow) {
                        const std::int64_t iw = ow * g.sw - g.pw + v;
                        if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

template <typename T>
std::vector<T>& conv_scratch() {
    thread_local std::vector<T> buf;
    return buf;
}

template <typename T>
std::vector<T> raw_conv(const Tensor<T>& x, const Tensor<T>& w, const ConvGeom& g) {
    std::vector<T> y(static_cast<std::size_t>(g.batch * g.c_out * g.oh * g.ow));
    auto& col = conv_scratch<T>();
    col.resize(static_cast<std::size_t>(g.c_in * g.kh * g.kw * g.oh * g.ow));
    const auto k = g.c_in * g.kh * g.kw;
    const auto cols = g.oh * g.ow;
    for (std::int64_t b = 0; b < g.batch; ++b) {
        im2col(x.data().data() + b * g.c_in * g.h * g.w, g, col.data());
        detail::gemm(false, false, g.c_out, cols, k, T(1), w.data().data(), k, col.data(), cols, T(0),
                     y.data() + b * g.c_out * cols, cols);
    }
    return y;
}

template <typename T>
std::vector<T> raw_conv_dx(const Tensor<T>& gy, const Tensor<T>& w, const ConvGeom& g) {
    std::vector<T> gx(static_cast<std::size_t>(g.batch * g.c_in * g.h * g.w), T(0));
    auto& col = conv_scratch<T>();
    const auto k = g.c_in * g.kh * g.kw;
    const auto cols = g.oh * g.ow;
    col.resize(static_cast<std::size_t>(k * cols));
    for (std::int64_t b = 0; b < g.batch; ++b) {
        detail::gemm(true, false, k, cols, g.c_out, T(1), w.data().data(), k, gy.data().data() + b * g.c_out * cols,
                     cols, T(0), col.data(), cols);
        col2im(col.data(), g, gx.data() + b * g.c_in * g.h * g.w);
    }
    return gx;
}

template <typename T>
std::vector<T> raw_conv_dw(const Tensor<T>& x, const Tensor<T>& gy, const ConvGeom& g) {
    std::vector<T> gw(static_cast<std::size_t>(g.c_out * g.c_in * g.kh * g.kw), T(0));
    auto& col = conv_scratch<T>();
    const auto k = g.c_in * g.kh * g.kw;
    const auto cols = g.oh * g.ow;
    col.resize(static_cast<std::size_t>(k * cols));
    for (std::int64_t b = 0; b < g.batch; ++b) {
        im2col(x.data().data() + b * g.c_in * g.h * g.w, g, col.data());
        detail::gemm(false, true, g.c_out, k, cols, T(1), gy.data().data() + b * g.c_out * cols, cols, col.data(),
                     cols, T(1), gw.data(), k);
    }
    return gw;
}

}  // namespace

template <typename T>
Tensor<T> conv2d_nobias(const Tensor<T>& x, const Tensor<T>& w, IntPair stride, IntPair pad) {
    auto g = conv_geometry(x, w, stride, pad, "conv2d");
    auto data = raw_conv(x, w, g);
    Shape shape{g.batch, g.c_out, g.oh, g.ow};
    if (!should_record<T>({&x, &w})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<ConvOp<T>>(x, w, stride, pad));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, IntPair stride, IntPair pad) {
    auto y = conv2d_nobias(x, w, stride, pad);
    if (!b.defined()) return y;
    if (b.numel() != w.dim(0))
        throw_invalid("conv2d: bias size " + std::to_string(b.numel()) + " != out channels " +
                      std::to_string(w.dim(0)));
    return add(y, reshape(b, Shape{1, w.dim(0), 1, 1}));
}

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, IntPair stride, IntPair pad,
                            std::int64_t out_h, std::int64_t out_w) {
    if (gy.rank() != 4 || w.rank() != 4)
        throw_invalid("conv2d_input_grad: expected rank-4 operands");
    if (gy.dim(1) != w.dim(0))
        throw_invalid("conv2d_input_grad: channel mismatch " + std::to_string(gy.dim(1)) + " vs " +
                      std::to_string(w.dim(0)));
    ConvGeom g{};
    g.batch = gy.dim(0);
    g.c_out = w.dim(0);
    g.c_in = w.dim(1);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.sh = stride.first;
    g.sw = stride.second;
    g.ph = pad.first;
    g.pw = pad.second;
    g.h = out_h;
    g.w = out_w;
    g.oh = gy.dim(2);
    g.ow = gy.dim(3);
    const auto expect_oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
    const auto expect_ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
    if (expect_oh != g.oh || expect_ow != g.ow)
        throw_invalid("conv2d_input_grad: geometry mismatch, expected output " + std::to_string(expect_oh) + "x" +
                      std::to_string(expect_ow) + ", got " + std::to_string(g.oh) + "x" + std::to_string(g.ow));
    auto data = raw_conv_dx(gy, w, g);
    Shape shape{g.batch, g.c_in, g.h, g.w};
    if (!should_record<T>({&gy, &w})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<ConvDxOp<T>>(gy, w, stride, pad));
}

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, IntPair stride, IntPair pad,
                             std::int64_t kh, std::int64_t kw) {
    if (x.rank() != 4 || gy.rank() != 4) throw_invalid("conv2d_weight_grad: expected rank-4 operands");
    if (x.dim(0) != gy.dim(0)) throw_invalid("conv2d_weight_grad: batch mismatch");
    ConvGeom g{};
    g.batch = x.dim(0);
    g.c_in = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.c_out = gy.dim(1);
    g.kh = kh;
    g.kw = kw;
    g.sh = stride.first;
    g.sw = stride.second;
    g.ph = pad.first;
    g.pw = pad.second;
    g.oh = gy.dim(2);
    g.ow = gy.dim(3);
    const auto expect_oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
    const auto expect_ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
    if (expect_oh != g.oh || expect_ow != g.ow)
        throw_invalid("conv2d_weight_grad: geometry mismatch for kernel " + std::to_string(kh) + "x" +
                      std::to_string(kw));
    auto data = raw_conv_dw(x, gy, g);
    Shape shape{g.c_out, g.c_in, g.kh, g.kw};
    if (!should_record<T>({&x, &gy})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<ConvDwOp<T>>(x, gy, stride, pad));
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, IntPair stride, IntPair pad) {
    if (x.rank() != 4 || w.rank() != 4) throw_invalid("conv_transpose2d: expected rank-4 operands");
    if (x.dim(1) != w.dim(0))
        throw_invalid("conv_transpose2d: input channels " + std::to_string(x.dim(1)) +
                      " != weight in-channels " + std::to_string(w.dim(0)));
    const auto oh = (x.dim(2) - 1) * stride.first - 2 * pad.first + w.dim(2);
    const auto ow = (x.dim(3) - 1) * stride.second - 2 * pad.second + w.dim(3);
    if (oh < 1 || ow < 1) throw_invalid("conv_transpose2d: output would be empty");
    auto y = conv2d_input_grad(x, w, stride, pad, oh, ow);
    if (!b.defined()) return y;
    if (b.numel() != w.dim(1))
        throw_invalid("conv_transpose2d: bias size " + std::to_string(b.numel()) + " != out channels " +
                      std::to_string(w.dim(1)));
    return add(y, reshape(b, Shape{1, w.dim(1), 1, 1}));
}

template <typename T>
Tensor<T> select_channels(const Tensor<T>& x, const std::vector<std::int64_t>& idx, std::int64_t n_sel) {
    if (x.rank() != 4) throw_invalid("select_channels: expected rank-4 input");
    const auto batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (static_cast<std::int64_t>(idx.size()) != batch * n_sel)
        throw_invalid("select_channels: index table size mismatch");
    for (auto i : idx)
        if (i < 0 || i >= c) throw_invalid("select_channels: channel index " + std::to_string(i) + " out of range");
    std::vector<T> data(static_cast<std::size_t>(batch * n_sel * plane));
    const auto dx = x.data();
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t s = 0; s < n_sel; ++s) {
            const auto src = dx.data() + (b * c + idx[b * n_sel + s]) * plane;
            std::copy(src, src + plane, data.data() + (b * n_sel + s) * plane);
        }
    Shape shape{batch, n_sel, x.dim(2), x.dim(3)};
    if (!should_record<T>({&x})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<SelectChannelsOp<T>>(x, idx, n_sel));
}

template <typename T>
Tensor<T> scatter_channels(const Tensor<T>& g, const std::vector<std::int64_t>& idx, std::int64_t channels) {
    if (g.rank() != 4) throw_invalid("scatter_channels: expected rank-4 input");
    const auto batch = g.dim(0), n_sel = g.dim(1), plane = g.dim(2) * g.dim(3);
    if (static_cast<std::int64_t>(idx.size()) != batch * n_sel)
        throw_invalid("scatter_channels: index table size mismatch");
    std::vector<T> data(static_cast<std::size_t>(batch * channels * plane), T(0));
    const auto dg = g.data();
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t s = 0; s < n_sel; ++s) {
            const auto ch = idx[b * n_sel + s];
            if (ch < 0 || ch >= channels) throw_invalid("scatter_channels: channel index out of range");
            auto dst = data.data() + (b * channels + ch) * plane;
            const auto src = dg.data() + (b * n_sel + s) * plane;
            for (std::int64_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
    Shape shape{batch, channels, g.dim(2), g.dim(3)};
    if (!should_record<T>({&g})) return Tensor<T>::from_data(std::move(shape), std::move(data));
    return attach(std::move(shape), std::move(data), std::make_shared<ScatterChannelsOp<T>>(g, idx, channels));
}

// ---------------------------------------------------------------------------
// engine
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct EngineRun {
    std::unordered_map<TensorNode<T>*, Tensor<T>> cotangents;
    bool any_path = false;
};

// Reverse topological sweep from `output`, propagating cotangents to every
// node from which some target is reachable.
template <typename T>
EngineRun<T> run_engine(const Tensor<T>& output, const std::unordered_set<TensorNode<T>*>& targets,
                        bool create_graph) {
    // needed(t): t is a target, or some target lies under t's producer.
    std::unordered_map<TensorNode<T>*, bool> needed;
    {
        std::vector<std::pair<TensorNode<T>*, bool>> stack{{output.node(), false}};
        while (!stack.empty()) {
            auto [node, expanded] = stack.back();
            stack.pop_back();
            if (needed.count(node) && !expanded) continue;
            if (!expanded) {
                needed.emplace(node, targets.count(node) > 0);
                if (node->producer) {
                    stack.push_back({node, true});
                    for (const auto& in : node->producer->inputs)
                        if (in.defined() && !needed.count(in.node())) stack.push_back({in.node(), false});
                }
                continue;
            }
            bool v = targets.count(node) > 0;
            for (const auto& in : node->producer->inputs)
                if (in.defined() && needed[in.node()]) v = true;
            needed[node] = v;
        }
    }

    // post-order over producers; handles kept alive via the tensor copies
    std::vector<Tensor<T>> topo;
    {
        std::unordered_set<TensorNode<T>*> visited;
        std::vector<std::pair<Tensor<T>, bool>> stack{{output, false}};
        while (!stack.empty()) {
            auto [t, expanded] = stack.back();
            stack.pop_back();
            if (expanded) {
                topo.push_back(t);
                continue;
            }
            if (visited.count(t.node())) continue;
            visited.insert(t.node());
            if (!needed[t.node()]) continue;
            stack.push_back({t, true});
            if (t.producer())
                for (const auto& in : t.producer()->inputs)
                    if (in.defined() && !visited.count(in.node()) && needed.count(in.node()) && needed[in.node()])
                        stack.push_back({in, false});
        }
    }

    EngineRun<T> run;
    if (!needed[output.node()]) return run;
    run.cotangents[output.node()] = Tensor<T>::full(output.shape(), T(1));

    RecordingGuard rec(create_graph);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        const auto& t = *it;
        auto ct_it = run.cotangents.find(t.node());
        if (ct_it == run.cotangents.end()) continue;
        if (targets.count(t.node())) run.any_path = true;
        auto op = t.producer();
        if (!op) continue;
        const Tensor<T> ct = ct_it->second;
        auto vjps = op->vjp(ct, t);
        if (vjps.size() != op->inputs.size())
            throw_state(std::string("vjp arity mismatch in op ") + op->name);
        for (std::size_t i = 0; i < vjps.size(); ++i) {
            const auto& in = op->inputs[i];
            if (!in.defined() || !vjps[i].defined()) continue;
            auto needed_it = needed.find(in.node());
            if (needed_it == needed.end() || !needed_it->second) continue;
            if (vjps[i].shape() != in.shape())
                throw_state(std::string("vjp shape mismatch in op ") + op->name + ": " +
                            shape_str(vjps[i].shape()) + " vs " + shape_str(in.shape()));
            auto existing = run.cotangents.find(in.node());
            if (existing == run.cotangents.end())
                run.cotangents.emplace(in.node(), vjps[i]);
            else
                existing->second = add(existing->second, vjps[i]);
        }
        // cotangent of an interior node is no longer needed
        if (!targets.count(t.node())) run.cotangents.erase(t.node());
    }
    return run;
}

}  // namespace

template <typename T>
GradResult<T> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs, bool create_graph) {
    if (!output.defined()) throw_invalid("grad: undefined output");
    if (output.numel() != 1)
        throw_invalid("grad: output must be a single element, got " + shape_str(output.shape()));
    std::unordered_set<TensorNode<T>*> targets;
    for (const auto& in : inputs) {
        if (!in.defined()) throw_invalid("grad: undefined input tensor");
        targets.insert(in.node());
    }
    auto run = run_engine(output, targets, create_graph);
    GradResult<T> result;
    result.disconnected = !run.any_path;
    result.grads.reserve(inputs.size());
    for (const auto& in : inputs) {
        auto it = run.cotangents.find(in.node());
        if (it == run.cotangents.end())
            result.grads.push_back(Tensor<T>::zeros(in.shape()));
        else
            result.grads.push_back(it->second);
    }
    return result;
}

template <typename T>
bool backward(const Tensor<T>& loss, bool create_graph) {
    if (!loss.defined()) throw_invalid("backward: undefined loss");
    if (loss.numel() != 1)
        throw_invalid("backward: loss must be scalar, got " + shape_str(loss.shape()));
    // find every reachable requires_grad leaf
    std::unordered_set<TensorNode<T>*> targets;
    {
        std::unordered_set<TensorNode<T>*> visited;
        std::vector<TensorNode<T>*> stack{loss.node()};
        while (!stack.empty()) {
            auto* node = stack.back();
            stack.pop_back();
            if (!visited.insert(node).second) continue;
            if (!node->producer) {
                if (node->requires_grad) targets.insert(node);
                continue;
            }
            for (const auto& in : node->producer->inputs)
                if (in.defined()) stack.push_back(in.node());
        }
    }
    if (targets.empty()) return true;
    auto run = run_engine(loss, targets, create_graph);
    for (auto* node : targets) {
        auto it = run.cotangents.find(node);
        if (it == run.cotangents.end()) continue;
        // accumulate without history
        if (!node->grad.defined()) {
            node->grad = it->second.detach();
        } else {
            auto dst = node->grad.mutable_data();
            auto src = it->second.data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
    }
    return !run.any_path;
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

#define PCTGAN_INSTANTIATE_OPS(T)                                                                              \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> neg<T>(const Tensor<T>&);                                                               \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                                          \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                     \
    template Tensor<T> recip<T>(const Tensor<T>&);                                                             \
    template Tensor<T> sqrt<T>(const Tensor<T>&);                                                              \
    template Tensor<T> square<T>(const Tensor<T>&);                                                            \
    template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                                     \
    template Tensor<T> tanh<T>(const Tensor<T>&);                                                              \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                           \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                    \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                                         \
    template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                                  \
    template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::int64_t, std::int64_t);                    \
    template Tensor<T> pad_slice<T>(const Tensor<T>&, std::size_t, std::int64_t, std::int64_t);                \
    template Tensor<T> sum_to<T>(const Tensor<T>&, Shape);                                                     \
    template Tensor<T> broadcast_to<T>(const Tensor<T>&, Shape);                                               \
    template Tensor<T> sum_all<T>(const Tensor<T>&);                                                           \
    template Tensor<T> mean_all<T>(const Tensor<T>&);                                                          \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
    template Tensor<T> conv2d_nobias<T>(const Tensor<T>&, const Tensor<T>&, IntPair, IntPair);                 \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, IntPair, IntPair);      \
    template Tensor<T> conv2d_input_grad<T>(const Tensor<T>&, const Tensor<T>&, IntPair, IntPair, std::int64_t, \
                                            std::int64_t);                                                     \
    template Tensor<T> conv2d_weight_grad<T>(const Tensor<T>&, const Tensor<T>&, IntPair, IntPair, std::int64_t, \
                                             std::int64_t);                                                    \
    template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, IntPair,      \
                                           IntPair);                                                           \
    template Tensor<T> select_channels<T>(const Tensor<T>&, const std::vector<std::int64_t>&, std::int64_t);   \
    template Tensor<T> scatter_channels<T>(const Tensor<T>&, const std::vector<std::int64_t>&, std::int64_t);  \
    template GradResult<T> grad<T>(const Tensor<T>&, const std::vector<Tensor<T>>&, bool);                     \
    template bool backward<T>(const Tensor<T>&, bool);

PCTGAN_INSTANTIATE_OPS(float)
PCTGAN_INSTANTIATE_OPS(double)

#undef PCTGAN_INSTANTIATE_OPS

}  // namespace pctgan::ag
