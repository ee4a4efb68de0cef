#ifndef DCV_AUTOGRAD_HPP
#define DCV_AUTOGRAD_HPP

#include "dcv/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

namespace dcv {

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_mode_enabled() { return detail::grad_enabled; }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename S>
struct Node {
    Tensor<S> value;
    Buffer<S> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Receives this node; reads node.grad and accumulates into parents.
    std::function<void(Node&)> backward_fn;

    Buffer<S>& ensure_grad() {
        if (grad.size() != value.numel()) grad = Buffer<S>::Zero(value.numel());
        return grad;
    }
    bool is_leaf() const { return !backward_fn; }
};

/// Handle to a node of the computation graph. Copies share the node.
template <typename S>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<S> value, bool requires_grad = false) : node_(std::make_shared<Node<S>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<S>& value() const { return node_->value; }
    Tensor<S>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    Index dim(std::size_t i) const { return node_->value.shape.at(i); }
    Index numel() const { return node_->value.numel(); }
    const S* ptr() const { return node_->value.ptr(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    /// Gradient buffer; zero-filled if nothing has been accumulated.
    const Buffer<S>& grad() const { return node_->ensure_grad(); }
    Buffer<S>& mutable_grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.size() == node_->value.numel(); }
    void zero_grad() { node_->grad.resize(0); }

    /// Detached copy sharing no graph history.
    Var detach() const { return Var(node_->value, false); }

    const std::shared_ptr<Node<S>>& node() const { return node_; }

private:
    std::shared_ptr<Node<S>> node_;
};

/// Builds the result node of an op. `fn` is recorded only if grad mode is
/// on and at least one input needs a gradient.
template <typename S>
Var<S> make_result(Tensor<S> value, std::vector<Var<S>> inputs, std::function<void(Node<S>&)> fn) {
    Var<S> out(std::move(value), false);
    if (!grad_mode_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs)
        if (in.defined() && in.requires_grad()) any = true;
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (auto& in : inputs)
        if (in.defined()) node.parents.push_back(in.node());
    node.backward_fn = std::move(fn);
    return out;
}

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate; interior
/// gradients and closures are released as the sweep passes them.
template <typename S>
void backward(const Var<S>& root) {
    if (root.numel() != 1) throw ShapeError("backward() requires a scalar root, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // Owning references: clearing a node's parents must not free queued nodes.
    std::vector<std::shared_ptr<Node<S>>> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<S>>, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            std::shared_ptr<Node<S>> p = node->parents[next++];
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.push_back({std::move(p), 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* node = it->get();
        if (node->is_leaf()) continue;
        if (node->grad.size() == node->value.numel()) node->backward_fn(*node);
        node->grad.resize(0);
        node->backward_fn = nullptr;
        node->parents.clear();
    }
}

}  // namespace dcv

#endif  // DCV_AUTOGRAD_HPP
