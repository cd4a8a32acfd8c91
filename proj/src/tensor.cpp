#include "polypseg/tensor.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

namespace polypseg {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values.assign(static_cast<std::size_t>(n), 0.0);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    t.fill_(value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    auto n = shape_numel(shape);
    check(static_cast<std::int64_t>(data.size()) == n,
          "from_data: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.values()) v = rng.normal() * stddev;
    return t;
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = shape();
    check(idx.size() == s.size(), "at(): rank mismatch");
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (auto i : idx) {
        check(i >= 0 && i < s[d], "at(): index out of range");
        flat = flat * s[d] + i;
        ++d;
    }
    return node_->values[static_cast<std::size_t>(flat)];
}

Tensor Tensor::clone() const {
    return Tensor::from_data(shape(), node_->values, node_->requires_grad);
}

Tensor Tensor::detach() const {
    return Tensor::from_data(shape(), node_->values, false);
}

Tensor make_op_result(Shape shape, std::vector<double> values,
                      const std::vector<Tensor>& parents,
                      std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);

    bool any_grad = false;
    if (GradMode::enabled()) {
        for (const auto& p : parents) {
            if (p.defined() && p.node()->requires_grad) {
                any_grad = true;
                break;
            }
        }
    }
    if (any_grad) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void backward(const Tensor& root) {
    check(root.numel() == 1, "backward() requires a scalar root, got " + shape_str(root.shape()));
    check(root.requires_grad(), "backward() root does not require grad");

    // Iterative post-order over the parent DAG.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    // Keeps shared ownership alive while we walk raw pointers.
    std::vector<NodePtr> keep_alive;

    struct Frame {
        TensorNode* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.raw(), 0});
    visited.insert(root.raw());
    keep_alive.push_back(root.node());

    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next_parent].get();
            keep_alive.push_back(f.node->parents[f.next_parent]);
            ++f.next_parent;
            if (p != nullptr && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (auto* n : order) n->ensure_grad();
    root.raw()->grad[0] = 1.0;

    // order is post-order (parents before children), so iterate in reverse.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace polypseg
