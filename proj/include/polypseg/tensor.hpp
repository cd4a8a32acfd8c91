#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "polypseg/common.hpp"
#include "polypseg/rng.hpp"

namespace polypseg {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the dynamically built computation graph. Values and gradient
// are dense row-major doubles.
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated lazily, same length as values
    bool requires_grad = false;

    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }
    void detach_graph() {
        parents.clear();
        backward_fn = nullptr;
    }
};

// Thread-local switch controlling whether ops record the graph.
struct GradMode {
    static bool enabled();
    static void set_enabled(bool on);
};

// RAII guard disabling graph construction (inference / data paths).
class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Value-semantic handle to a shared TensorNode.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->numel(); }
    std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    double* data() { return node_->values.data(); }
    const double* data() const { return node_->values.data(); }
    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->zero_grad(); }

    // Scalar extraction; tensor must hold exactly one element.
    double item() const {
        check(numel() == 1, "item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->values[0];
    }

    double at(std::initializer_list<std::int64_t> idx) const;

    // Deep copy of values (no graph).
    Tensor clone() const;
    // Same values, detached from the graph (shares nothing).
    Tensor detach() const;

    void fill_(double v) { std::fill(node_->values.begin(), node_->values.end(), v); }

    NodePtr node() const { return node_; }
    TensorNode* raw() const { return node_.get(); }

private:
    NodePtr node_;
};

// Builds an op result: graph edges are recorded only when grad mode is on
// and at least one parent requires grad.
Tensor make_op_result(Shape shape, std::vector<double> values,
                      const std::vector<Tensor>& parents,
                      std::function<void(TensorNode&)> backward_fn);

// Reverse-mode sweep from a scalar root. Accumulates into .grad of every
// node reachable through parents that requires grad.
void backward(const Tensor& root);

}  // namespace polypseg
