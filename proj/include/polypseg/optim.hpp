#pragma once

#include <cstdint>
#include <vector>

#include "polypseg/tensor.hpp"

namespace polypseg {

// Decoupled weight decay applied to every parameter.
struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg);

    void zero_grad();
    void step();

    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::int64_t steps() const { return t_; }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

// Global norm clipping over the concatenated gradient. Scales gradients in
// place when the norm exceeds max_norm and returns {pre, post} norms.
std::pair<double, double> clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace polypseg
