#pragma once

// Dense row-major tensor with reverse-mode differentiation.
//
// Every differentiable op produces a node that records its inputs and an
// adjoint closure. Nodes are stamped with a monotonically increasing sequence
// number when recorded, so recording order is a topological order of the
// graph; backward() replays the reachable records in exactly reverse order.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::atomic<std::uint64_t>& tape_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> inputs;
    // Reads this node's grad and accumulates into the grads of `inputs`.
    std::function<void(TensorNode&)> adjoint;

    bool is_leaf() const { return !adjoint; }

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{});
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->data.assign(shape_numel(shape), T{});
        node_->shape = std::move(shape);
        set_requires_grad(requires_grad);
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        set_requires_grad(requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, {v}, requires_grad); }

    /// Creates the output of an op. The record is kept only when recording is
    /// enabled and some input requires a gradient.
    static Tensor from_op(Shape shape, std::vector<T> values, std::string_view op, std::vector<Tensor> inputs,
                          std::function<void(Node&)> adjoint) {
        Tensor out(std::move(shape), std::move(values));
        out.node_->op = op;
        const bool needs = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                               return t.defined() && t.requires_grad();
                           });
        if (needs) {
            out.node_->requires_grad = true;
            out.node_->seq = ++detail::tape_counter();
            for (auto& in : inputs) out.node_->inputs.push_back(in.defined() ? in.node_ : nullptr);
            out.node_->adjoint = std::move(adjoint);
        }
        return out;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }
    std::string_view op() const { return node_->op; }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<T> grad() { return node_->ensure_grad(); }
    std::span<const T> grad() const { return node_->ensure_grad(); }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
        return node_->data[0];
    }

    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool on) {
        node_->requires_grad = on;
        if (on) node_->ensure_grad();
    }

    void zero_grad() {
        if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T{});
    }

    /// Copy of the values with no history.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    /// The same values under another shape with equal element count.
    Tensor reshape(Shape shape) const;

    /// Accumulates d(this)/d(leaf) into every reachable leaf that requires a
    /// gradient. Intermediate gradients are recomputed from scratch.
    void backward() const {
        if (numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_string(shape()));
        if (!requires_grad()) return;
        auto order = reachable();
        for (Node* n : order) {
            if (!n->is_leaf()) n->grad.assign(n->data.size(), T{});
        }
        node_->ensure_grad()[0] += T{1};
        for (Node* n : order) {
            if (n->adjoint) n->adjoint(*n);
        }
    }

    /// The recorded ops reachable from this tensor, in recording order.
    std::vector<const Node*> tape() const {
        auto order = reachable();
        std::vector<const Node*> out;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if (!(*it)->is_leaf()) out.push_back(*it);
        }
        return out;
    }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    // Reachable nodes that require grad, sorted newest record first.
    std::vector<Node*> reachable() const {
        std::vector<Node*> order;
        std::unordered_set<const Node*> seen;
        std::vector<Node*> stack{node_.get()};
        while (!stack.empty()) {
            Node* n = stack.back();
            stack.pop_back();
            if (!n || !n->requires_grad || !seen.insert(n).second) continue;
            order.push_back(n);
            for (auto& in : n->inputs) stack.push_back(in.get());
        }
        std::stable_sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
        return order;
    }

    std::shared_ptr<Node> node_;
};

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_string(shape()) + " to " + shape_string(new_shape));
    }
    return Tensor::from_op(std::move(new_shape), node_->data, "reshape", {*this}, [](Node& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

}  // namespace mer
