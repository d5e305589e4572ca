#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pctgan/common.hpp"

namespace pctgan::ag {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

// One recorded primitive application: operands plus the rule producing
// vector-Jacobian products. VJPs are built from recorded primitives, so a
// backward pass run with recording enabled is itself differentiable.
template <typename T>
struct OpNode {
    const char* name;
    std::vector<Tensor<T>> inputs;

    explicit OpNode(const char* n) : name(n) {}
    virtual ~OpNode() = default;

    // ct: cotangent of the op output; out: the recorded output itself.
    // Returns one cotangent per input slot; undefined tensors mark slots
    // that do not need gradients.
    virtual std::vector<Tensor<T>> vjp(const Tensor<T>& ct, const Tensor<T>& out) const = 0;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::shared_ptr<OpNode<T>> producer;  // null for leaves
    Tensor<T> grad;                       // accumulated by backward(); leaves only
};

// Shared handle to a dense array plus its place in the computation record.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    std::span<const T> data() const { return node_->data; }
    // Leaf mutation only (optimizer updates, buffer refills). Graphs recorded
    // before a mutation must not be replayed afterwards.
    std::span<T> mutable_data() { return node_->data; }

    T item() const {
        if (numel() != 1) throw_invalid("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        if (node_->producer) throw_invalid("set_requires_grad: only valid on leaf tensors");
        node_->requires_grad = value;
        return *this;
    }

    Tensor grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor(); }
    void accumulate_grad(const Tensor& g);

    // Value copy with no history.
    Tensor detach() const;
    template <typename U>
    Tensor<U> cast() const;

    TensorNode<T>* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }
    std::shared_ptr<OpNode<T>> producer() const { return node_->producer; }

    static Tensor from_node(std::shared_ptr<TensorNode<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Thread-local recording switch. Ops executed while recording is off produce
// plain values with no producer.
bool grad_recording_enabled();
void set_grad_recording(bool enabled);

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_recording_enabled()) { set_grad_recording(false); }
    ~NoGradGuard() { set_grad_recording(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class RecordingGuard {
public:
    explicit RecordingGuard(bool enabled) : prev_(grad_recording_enabled()) { set_grad_recording(enabled); }
    ~RecordingGuard() { set_grad_recording(prev_); }
    RecordingGuard(const RecordingGuard&) = delete;
    RecordingGuard& operator=(const RecordingGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return from_data(std::move(shape), {}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = numel_of(shape);
    return from_data(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    const auto n = numel_of(shape);
    auto node = std::make_shared<TensorNode<T>>();
    if (data.empty()) {
        data.assign(static_cast<std::size_t>(n), T(0));
    } else if (static_cast<std::int64_t>(data.size()) != n) {
        throw_invalid("from_data: shape " + shape_str(shape) + " needs " + std::to_string(n) +
                      " values, got " + std::to_string(data.size()));
    }
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return from_node(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T stddev, bool requires_grad) {
    const auto n = numel_of(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
void Tensor<T>::accumulate_grad(const Tensor& g) {
    if (!g.defined()) return;
    if (!node_->grad.defined()) {
        node_->grad = g.detach();
        return;
    }
    if (node_->grad.shape() != g.shape())
        throw_invalid("accumulate_grad: shape mismatch " + shape_str(node_->grad.shape()) + " vs " +
                      shape_str(g.shape()));
    auto dst = node_->grad.mutable_data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from_data(node_->shape, node_->data, false);
}

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
    std::vector<U> data(node_->data.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<U>(node_->data[i]);
    return Tensor<U>::from_data(node_->shape, std::move(data), false);
}

}  // namespace pctgan::ag
