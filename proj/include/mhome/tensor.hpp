// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a dynamic reverse-mode tape.
//
// Every op result keeps shared references to its inputs plus a closure that
// pushes the output gradient back to them. Nodes carry a global creation
// sequence number, so sorting reachable nodes by descending sequence gives a
// valid reverse topological order for the backward sweep.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace mhome {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i)
        os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
struct AxisView {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis)
{
    if (axis >= s.size())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i)
        v.outer *= s[i];
    v.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i)
        v.inner *= s[i];
    return v;
}

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter()
{
    static std::atomic<std::uint64_t> seq{0};
    return seq;
}

inline bool& grad_mode()
{
    thread_local bool enabled = true;
    return enabled;
}

template <typename T>
bool all_finite(std::span<const T> v)
{
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
struct Node {
    using BackwardFn = std::function<void(const std::vector<T>&)>;

    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool finite = true;
    bool consumed = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    std::vector<T>& grad_buffer()
    {
        if (grad.empty())
            grad.assign(value.size(), T(0));
        return grad;
    }
};

} // namespace detail

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodeT = detail::Node<T>;

    Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<NodeT>())
    {
        if (mhome::numel(shape) != values.size())
            throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                             std::to_string(mhome::numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
        node_->finite = detail::all_finite<T>(node_->value);
        node_->seq = detail::sequence_counter()++;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        const auto n = mhome::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false)
    {
        const auto n = mhome::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(1), requires_grad); }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    T operator[](std::size_t i) const { return node_->value[i]; }
    T item() const
    {
        if (numel() != 1)
            throw ContractError("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }
    bool is_finite() const { return node_->finite; }

    /// Gradient accumulated by backward(); empty when nothing has reached this tensor.
    std::span<const T> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    /// In-place access for leaf parameters (optimizer updates, initialization).
    std::span<T> mutable_data()
    {
        if (!node_->leaf)
            throw ContractError("mutable_data() is only available on leaf tensors");
        return node_->value;
    }
    void refresh_finite() { node_->finite = detail::all_finite<T>(node_->value); }

    /// Copy of the values without tape history.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    const std::shared_ptr<NodeT>& impl() const { return node_; }
    explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<NodeT> node_;
};

namespace detail {

/// Wraps an op result into a tape node. The backward closure receives the
/// gradient w.r.t. the output and must accumulate into its parents.
/// `may_be_nonfinite` is for ops that emit infinities on purpose (masking).
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      typename Node<T>::BackwardFn backward, bool may_be_nonfinite = false)
{
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->leaf = false;
    node->seq = sequence_counter()++;
    node->finite = all_finite<T>(node->value);

    bool inputs_finite = true;
    bool needs_grad = false;
    for (const auto& p : parents) {
        inputs_finite = inputs_finite && p->finite;
        needs_grad = needs_grad || p->requires_grad;
    }
    if (!node->finite && inputs_finite && !may_be_nonfinite)
        throw NumericalError(std::string("non-finite value produced by '") + op + "' from finite inputs");

    if (needs_grad && grad_mode()) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& n)
{
    return n->requires_grad;
}

} // namespace detail

/// Runs the reverse sweep from a scalar loss, accumulating into every leaf that
/// requires grad. Intermediate nodes are released afterwards, so a second call on
/// the same loss (without a fresh forward) is rejected. Returns the number of
/// tape nodes visited.
template <typename T>
std::size_t backward(const Tensor<T>& loss)
{
    auto root = loss.impl();
    if (root->value.size() != 1)
        throw ContractError("backward() needs a scalar loss, got shape " + to_string(root->shape));
    if (root->consumed)
        throw ContractError("backward() already ran on this loss; run the forward pass again");
    if (!root->requires_grad)
        throw ContractError("loss does not depend on any tensor that requires grad");

    using NodeT = detail::Node<T>;
    // Owning references keep every node alive until the release pass is done.
    std::vector<std::shared_ptr<NodeT>> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::shared_ptr<NodeT>> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto n = std::move(stack.back());
        stack.pop_back();
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second)
                stack.push_back(p);
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

    root->grad_buffer();
    root->grad[0] += T(1);
    for (const auto& n : order) {
        if (n->backward && !n->grad.empty())
            n->backward(n->grad);
    }
    for (const auto& n : order) {
        if (!n->leaf) {
            n->backward = nullptr;
            n->parents.clear();
            if (n != root)
                n->grad.clear();
            n->consumed = true;
        }
    }
    root->consumed = true;
    return order.size();
}

} // namespace mhome
