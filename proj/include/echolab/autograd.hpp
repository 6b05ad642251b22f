#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "echolab/tensor.hpp"

namespace echolab {

// Reverse-mode autodiff over Tensor. Graphs are built eagerly; backward()
// walks the graph in reverse topological order. Leaves with requires_grad
// accumulate into their grad tensor, everything else is freed with the graph.

struct GradNode;
using GradNodePtr = std::shared_ptr<GradNode>;

struct GradNode {
    Tensor value;
    Tensor grad;  // undefined until first accumulation
    bool requires_grad = false;
    std::vector<GradNodePtr> parents;
    // Accumulates this node's grad into its parents' grads.
    std::function<void(GradNode&)> backprop;

    void accumulate(const Tensor& g) {
        if (!grad.defined()) grad = Tensor::zeros(value.shape());
        double* dst = grad.data();
        const double* src = g.data();
        for (size_t i = 0; i < grad.size(); i++) dst[i] += src[i];
    }
    void ensure_grad() {
        if (!grad.defined()) grad = Tensor::zeros(value.shape());
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

class Var {
public:
    Var() = default;
    explicit Var(GradNodePtr n) : n_(std::move(n)) {}

    // constant (no grad) from tensor
    static Var constant(Tensor t) {
        auto n = std::make_shared<GradNode>();
        n->value = std::move(t);
        return Var(n);
    }

    static Var leaf(Tensor t, bool requires_grad) {
        auto n = std::make_shared<GradNode>();
        n->value = std::move(t);
        n->requires_grad = requires_grad && grad_mode_flag();
        return Var(n);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& val() const { return n_->value; }
    Tensor& mutable_val() { return n_->value; }
    const Shape& shape() const { return n_->value.shape(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    GradNodePtr node() const { return n_; }

    const Tensor& grad() const {
        n_->ensure_grad();
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.defined(); }
    void zero_grad() {
        if (n_->grad.defined()) n_->grad.fill(0.0);
    }

    Var detach() const {
        auto n = std::make_shared<GradNode>();
        n->value = n_->value;  // shares buffer, cuts graph
        return Var(n);
    }

    // Backward from a scalar root.
    void backward() const {
        check(n_->value.size() == 1, "backward() requires a scalar root");
        if (!n_->requires_grad) return;
        std::vector<GradNode*> order;
        topo_sort(order);
        n_->accumulate(Tensor::scalar(1.0));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            GradNode* node = *it;
            if (node->backprop && node->grad.defined()) node->backprop(*node);
            // free interior grads as soon as they are consumed; leaves keep theirs
            if (node->backprop) {
                node->grad = Tensor();
                node->backprop = nullptr;
            }
        }
    }

private:
    void topo_sort(std::vector<GradNode*>& order) const {
        // iterative DFS; order is deterministic (parent list order)
        std::unordered_set<GradNode*> seen;
        std::vector<std::pair<GradNode*, size_t>> stack;
        stack.push_back({n_.get(), 0});
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                GradNode* p = node->parents[idx].get();
                idx++;
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    GradNodePtr n_;
};

// Helper for defining ops: wires value/parents/backprop and propagates the
// requires_grad flag. Backprop is dropped when grad mode is off or no parent
// needs gradients, so inference builds no graph.
inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<void(GradNode&)> backprop) {
    auto n = std::make_shared<GradNode>();
    n->value = std::move(value);
    bool need = false;
    if (grad_mode_flag()) {
        for (const auto& p : parents)
            if (p.requires_grad()) need = true;
    }
    if (need) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Var(n);
}

}  // namespace echolab
