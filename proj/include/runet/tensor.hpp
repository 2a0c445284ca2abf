#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "runet/common.hpp"

namespace runet {

struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t count() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    std::int64_t plane() const { return static_cast<std::int64_t>(h) * w; }

    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

enum class OpKind {
    conv2d,
    maxpool2x2,
    max_unpool2x2,
    upsample_nearest2x,
    concat_channels,
    batchnorm2d,
    relu,
    sigmoid,
    add_scaled,
    sum_all,
    dice_loss,
};

namespace detail {

template <typename S>
struct TapeNodeT;

template <typename S>
struct TensorImpl {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad; // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<TapeNodeT<S>> node;
};

inline std::atomic<std::uint64_t>& tape_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}

// One recorded primitive application. Nodes form a DAG through `parents`;
// creation sequence numbers give a valid reverse topological order. A node is
// owned by its output tensor (and by downstream nodes through `parents`), so
// the output reference must stay weak to avoid a cycle. Input tensors are
// captured strongly inside `backprop`, which keeps the upstream graph alive
// for as long as anything downstream of it exists.
template <typename S>
struct TapeNodeT {
    std::uint64_t seq = 0;
    OpKind kind{};
    std::vector<std::shared_ptr<TapeNodeT<S>>> parents;
    std::weak_ptr<TensorImpl<S>> output;
    // Accumulates (+=) input gradients given the output gradient.
    std::function<void(const std::vector<S>& out_grad)> backprop;
};

} // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

// RAII scope that suppresses tape recording (used for inference).
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense 4-D (n,c,h,w) tensor with shared-storage handle semantics: copying a
// Tensor aliases the same data/grad buffers, which is what lets a parameter
// registry, the tape and user code all see one set of values.
template <typename S>
class Tensor {
public:
    using value_type = S;

    Tensor() = default;

    explicit Tensor(Shape shape, S fill = S(0))
        : impl_(std::make_shared<detail::TensorImpl<S>>()) {
        check_shape(shape);
        impl_->shape = shape;
        impl_->data.assign(static_cast<std::size_t>(shape.count()), fill);
    }

    Tensor(Shape shape, std::vector<S> values)
        : impl_(std::make_shared<detail::TensorImpl<S>>()) {
        check_shape(shape);
        if (static_cast<std::int64_t>(values.size()) != shape.count())
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape.str());
        impl_->shape = shape;
        impl_->data = std::move(values);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t count() const { return impl_->shape.count(); }

    S* data() { return impl_->data.data(); }
    const S* data() const { return impl_->data.data(); }
    std::vector<S>& vec() { return impl_->data; }
    const std::vector<S>& vec() const { return impl_->data; }

    S& at(int n, int c, int h, int w) {
        const Shape& s = impl_->shape;
        return impl_->data[((static_cast<std::int64_t>(n) * s.c + c) * s.h + h) * s.w + w];
    }
    S at(int n, int c, int h, int w) const {
        const Shape& s = impl_->shape;
        return impl_->data[((static_cast<std::int64_t>(n) * s.c + c) * s.h + h) * s.w + w];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    // Grad buffer, allocating zeros on first use.
    std::vector<S>& grad() {
        if (impl_->grad.empty())
            impl_->grad.assign(impl_->data.size(), S(0));
        return impl_->grad;
    }
    const std::vector<S>& grad() const { return impl_->grad; }

    void zero_grad() {
        if (!impl_->grad.empty())
            std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
    }

    // Participates in autodiff either as a tracked leaf or as an op output.
    bool tracked() const {
        return impl_ && (impl_->requires_grad || impl_->node != nullptr);
    }
    bool is_leaf() const { return impl_->node == nullptr; }

    const std::shared_ptr<detail::TapeNodeT<S>>& node() const { return impl_->node; }

    // Detached copy carrying no tape linkage.
    Tensor detached() const {
        Tensor t(impl_->shape);
        t.impl_->data = impl_->data;
        return t;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl<S>>& impl() const { return impl_; }

private:
    static void check_shape(const Shape& shape) {
        if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1)
            throw ShapeError("tensor dims must be positive, got " + shape.str());
    }

    std::shared_ptr<detail::TensorImpl<S>> impl_;
};

namespace detail {

// Records a tape node for `out` computed from `inputs`, unless recording is
// suppressed or no input participates in autodiff.
template <typename S, typename Fn>
void record(OpKind kind, Tensor<S>& out, const std::vector<Tensor<S>>& inputs, Fn&& backprop) {
    if (!grad_enabled())
        return;
    bool any_tracked = false;
    for (const auto& t : inputs)
        any_tracked = any_tracked || t.tracked();
    if (!any_tracked)
        return;
    auto node = std::make_shared<TapeNodeT<S>>();
    node->seq = ++tape_counter();
    node->kind = kind;
    node->output = out.impl();
    for (const auto& t : inputs)
        if (t.node())
            node->parents.push_back(t.node());
    node->backprop = std::forward<Fn>(backprop);
    out.impl()->node = std::move(node);
}

// Zero-fill (allocating if needed) the grad buffer of an impl.
template <typename S>
void reset_grad(TensorImpl<S>& impl) {
    impl.grad.assign(impl.data.size(), S(0));
}

} // namespace detail

// Reverse-mode sweep from `root`. Nodes reachable through the tape are
// visited exactly once, in descending creation order (a valid topological
// order because every op only consumes already-created tensors). Gradients of
// op outputs are reset at the start of each sweep, so repeating a sweep gives
// bitwise-identical results; leaf tensors accumulate across sweeps until
// zero_grad().
template <typename S>
void backward(Tensor<S>& root, const std::vector<S>* seed = nullptr) {
    if (!root.defined() || !root.node())
        throw UsageError("backward called on a tensor with no tape node");
    if (seed == nullptr && root.count() != 1)
        throw UsageError("backward without seed requires a scalar (1,1,1,1) root");
    if (seed != nullptr && static_cast<std::int64_t>(seed->size()) != root.count())
        throw ShapeError("seed gradient size does not match root");

    using Node = detail::TapeNodeT<S>;
    std::vector<Node*> nodes;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents)
            if (seen.insert(p.get()).second)
                stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const Node* a, const Node* b) { return a->seq > b->seq; });

    // Reset op-output grads before propagating; reachable outputs are always
    // alive because each non-root one is captured by a downstream backprop.
    for (Node* n : nodes)
        if (auto impl = n->output.lock())
            detail::reset_grad(*impl);

    {
        auto& g = root.grad();
        if (seed)
            g = *seed;
        else
            g[0] = S(1);
    }

    for (Node* n : nodes) {
        auto impl = n->output.lock();
        if (impl)
            n->backprop(impl->grad);
    }
}

} // namespace runet
