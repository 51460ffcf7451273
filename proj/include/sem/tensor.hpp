#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace sem {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

/// Thread-local switch for graph recording. Evaluation runs under NoGradGuard.
class GradMode {
  public:
    static bool enabled() { return flag(); }
    static void set_enabled(bool on) { flag() = on; }

  private:
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
};

class NoGradGuard {
  public:
    NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(previous_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

namespace detail {

/// Leaves new elements uninitialized on resize, so a gradient that is about to be fully
/// overwritten skips the zero fill.
template <typename T>
struct default_init_allocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = default_init_allocator<U>;
    };
    using std::allocator<T>::allocator;
    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T, default_init_allocator<T>> grad;  // empty until a gradient is first accumulated
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    T* grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad.data();
    }
    /// Gradient storage for an op about to touch every element. When `fresh` comes back true
    /// the contents are indeterminate and must be assigned rather than accumulated.
    T* grad_for_overwrite(bool& fresh) {
        fresh = grad.empty();
        if (fresh) grad.resize(data.size());
        return grad.data();
    }
    bool is_leaf() const { return !backward; }
};

}  // namespace detail

/// Dense row-major tensor with optional gradient tracking. Copies share storage.
template <typename T>
class Tensor {
  public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (sem::numel(shape) != values.size()) {
            throw DomainError("tensor: shape " + to_string(shape) + " does not match " +
                              std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<detail::Node<T>>();
        node->shape = std::move(shape);
        node->data = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }
    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = sem::numel(shape);
        return from(std::move(shape), std::vector<T>(n, value), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(1), requires_grad); }
    static Tensor scalar(T value, bool requires_grad = false) { return from({}, {value}, requires_grad); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const& { return node_->data; }
    // owning copy, so `for (auto v : f(x).data())` stays valid
    std::vector<T> data() && { return node_->data; }
    /// Raw write access. Only meaningful for leaves (parameters, inputs).
    std::span<T> mutable_data() { return node_->data; }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    T item() const {
        if (numel() != 1) throw DomainError("item(): tensor " + to_string(shape()) + " is not a scalar");
        return node_->data[0];
    }

    T at(std::initializer_list<std::size_t> index) const { return node_->data[offset(index)]; }

    /// Deep copy detached from any graph.
    Tensor clone(bool requires_grad = false) const { return from(shape(), node_->data, requires_grad); }

    const NodePtr& node() const noexcept { return node_; }
    const char* op_name() const { return node_->op; }

  private:
    std::size_t offset(std::initializer_list<std::size_t> index) const {
        if (index.size() != rank()) throw DomainError("at(): index rank does not match tensor rank");
        std::size_t off = 0;
        std::size_t i = 0;
        for (auto v : index) {
            if (v >= node_->shape[i]) throw DomainError("at(): index out of range");
            off = off * node_->shape[i] + v;
            ++i;
        }
        return off;
    }

    NodePtr node_;
};

namespace detail {

/// Build an op result. Inputs and the backward rule are kept only when recording is on
/// and some input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
#ifndef NDEBUG
    bool finite_inputs = std::all_of(inputs.begin(), inputs.end(), [](const auto& in) {
        return std::all_of(in->data.begin(), in->data.end(), [](T v) { return std::isfinite(v); });
    });
    if (finite_inputs) {
        for (T v : node->data) {
            if (!std::isfinite(v)) throw DomainError(std::string("non-finite output from ") + op);
        }
    }
#endif
    const bool track = GradMode::enabled() &&
                       std::any_of(inputs.begin(), inputs.end(), [](const auto& in) { return in->requires_grad; });
    if (track) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

}  // namespace detail

/// Recorded operations reachable from a root, in topological order (inputs first).
template <typename T>
class Tape {
  public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    static Tape record(const Tensor<T>& root) {
        Tape tape;
        std::unordered_set<const detail::Node<T>*> seen;
        // iterative post-order DFS
        std::vector<std::pair<NodePtr, std::size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                NodePtr child = node->inputs[next++];
                if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
            } else {
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    const std::vector<NodePtr>& nodes() const noexcept { return order_; }
    std::size_t size() const noexcept { return order_.size(); }

    /// Run every backward rule once, root last-recorded first.
    void run_backward() {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            auto& node = **it;
            if (node.backward && !node.grad.empty()) node.backward(node);
        }
    }

    /// Drop graph edges so intermediates can be freed.
    void release() {
        for (auto& node : order_) {
            if (!node->is_leaf()) {
                node->inputs.clear();
                node->backward = nullptr;
            }
        }
        order_.clear();
    }

  private:
    std::vector<NodePtr> order_;
};

/// Accumulate d(loss)/d(t) into every reachable tensor that requires a gradient.
/// The graph is released afterwards.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw DomainError("backward(): root must be a scalar, got " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;
    auto tape = Tape<T>::record(loss);
    loss.node()->grad_buffer()[0] += T(1);
    tape.run_backward();
    tape.release();
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace sem
