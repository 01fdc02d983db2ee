#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <type_traits>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "aclseg/errors.hpp"

namespace aclseg::num {

using Shape = std::vector<std::size_t>;

// Tensor storage. Eigen picks reduction and small-product paths from the
// runtime alignment of a pointer, so every buffer it maps is aligned to the
// widest packet to keep results independent of where the heap places it.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

// Graph recording switch. Ops executed while recording is off produce plain
// leaves, which is what evaluation and frozen snapshots want.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs that require it.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::span<T> grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

/// Dense row-major tensor handle with reverse-mode gradient support.
///
/// Copies share the underlying node, mirroring the reference semantics of
/// the usual deep-learning tensor types. Use clone() for an independent copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, Buffer<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    template <typename Alloc>
        requires(!std::is_same_v<Alloc, typename Buffer<T>::allocator_type>)
    Tensor(Shape shape, const std::vector<T, Alloc>& data, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{1}, Buffer<T>{v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<T> data() { return node_->value; }
    std::span<const T> data() const { return node_->value; }
    Buffer<T>& values() { return node_->value; }
    const Buffer<T>& values() const { return node_->value; }

    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    T operator[](std::size_t i) const { return node_->value[i]; }

    /// Leaf copy of the values, cut from any graph.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    template <typename U>
    Tensor<U> cast() const {
        Buffer<U> out(node_->value.begin(), node_->value.end());
        return Tensor<U>(shape(), std::move(out), requires_grad());
    }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
}

// Builds an op result. The backward closure is attached only when recording
// is on and at least one input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
    Tensor<T> out(std::move(shape), std::move(value));
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
    if (needs && grad_enabled()) {
        Node<T>* node = out.node();
        node->requires_grad = true;
        for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return out;
}

// Gradient sink for input i of a node; empty span when that input does not
// take gradients.
template <typename T>
std::span<T> sink(Node<T>& node, std::size_t i) {
    Node<T>* in = node.inputs.at(i).get();
    if (!in || !in->requires_grad) return {};
    return in->grad_buffer();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss.
///
/// Leaf gradients accumulate across calls until zero_grad(); gradients of
/// intermediate nodes are recomputed from scratch on every call.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward() on a loss that is not connected to any parameter");
    }

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node<T>* node : order) {
        if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

}  // namespace aclseg::num
