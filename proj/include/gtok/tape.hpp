#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "gtok/tensor.hpp"

namespace gtok {

/// Handle to a node on a Tape. Plain index, cheap to copy. A default
/// constructed Var is invalid and stands for "absent" (e.g. no bias).
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Operations append nodes in creation order, which is a
/// topological order of the graph, so the backward pass is a single reverse
/// sweep. Gradients accumulate across fan-out, so reusing a Var (shared
/// weights, batch loops) sums contributions as expected.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape&, const Tensor<T>&)>;

    Var leaf(Tensor<T> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, nullptr});
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    Var record(Tensor<T> value, std::initializer_list<Var> parents, BackFn back) {
        bool needs_grad = false;
        for (Var p : parents) {
            if (p.valid() && nodes_[static_cast<std::size_t>(p.id)].requires_grad) {
                needs_grad = true;
                break;
            }
        }
        nodes_.push_back(Node{std::move(value), Tensor<T>(), needs_grad, needs_grad ? std::move(back) : nullptr});
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    const Tensor<T>& val(Var v) const { return nodes_[check_(v)].value; }
    Tensor<T>& mutable_val(Var v) { return nodes_[check_(v)].value; }

    bool requires_grad(Var v) const { return nodes_[check_(v)].requires_grad; }

    /// Gradient of the last backward() target with respect to v. Zero tensor
    /// if nothing flowed into v.
    const Tensor<T>& grad(Var v) {
        Node& n = nodes_[check_(v)];
        if (n.grad.empty()) {
            n.grad = Tensor<T>(n.value.shape());
        }
        return n.grad;
    }

    void accumulate(Var v, const Tensor<T>& g) {
        Node& n = nodes_[check_(v)];
        if (!n.requires_grad) {
            return;
        }
        detail::require(g.shape() == n.value.shape(), "tape: gradient shape " + detail::shape_str(g.shape()) +
                                                          " does not match value shape " +
                                                          detail::shape_str(n.value.shape()));
        if (n.grad.empty()) {
            n.grad = g;
            return;
        }
        T* dst = n.grad.data();
        const T* src = g.data();
        const std::int64_t m = g.numel();
        for (std::int64_t i = 0; i < m; ++i) {
            dst[i] += src[i];
        }
    }

    /// Runs the reverse sweep from a scalar loss. Gradients of earlier
    /// backward calls are cleared first.
    void backward(Var loss) {
        const std::size_t id = check_(loss);
        detail::require(nodes_[id].value.numel() == 1, "backward: loss must be scalar, got " +
                                                           detail::shape_str(nodes_[id].value.shape()));
        for (Node& n : nodes_) {
            n.grad = Tensor<T>();
        }
        nodes_[id].grad = Tensor<T>(nodes_[id].value.shape(), T(1));
        for (std::size_t i = id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.back && !n.grad.empty()) {
                n.back(*this, n.grad);
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

    /// Drops every node at or beyond a previously taken size() mark. Used by
    /// sampling loops to keep one tape without unbounded growth.
    void truncate(std::size_t mark) { nodes_.resize(mark); }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad;
        BackFn back;
    };

    std::size_t check_(Var v) const {
        detail::require(v.valid() && static_cast<std::size_t>(v.id) < nodes_.size(), "tape: invalid var");
        return static_cast<std::size_t>(v.id);
    }

    std::vector<Node> nodes_;
};

}  // namespace gtok
