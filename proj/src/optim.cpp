#include "polypseg/optim.hpp"

#include <cmath>

#include "polypseg/common.hpp"

namespace polypseg {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    check<ConfigError>(cfg_.lr > 0 && cfg_.eps > 0 && cfg_.weight_decay >= 0,
                       "optimizer settings must be positive");
    check<ConfigError>(cfg_.beta1 > 0 && cfg_.beta1 < 1 && cfg_.beta2 > 0 && cfg_.beta2 < 1,
                       "betas must lie in (0,1)");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void AdamW::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& vals = params_[i].values();
        const auto& g = params_[i].grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < vals.size(); ++k) {
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            double mhat = m[k] / bc1;
            double vhat = v[k] / bc2;
            vals[k] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                  cfg_.weight_decay * vals[k]);
        }
    }
}

std::pair<double, double> clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    check<ConfigError>(max_norm > 0, "clip threshold must be positive");
    double sq = 0.0;
    for (auto& p : params)
        for (double g : p.grad()) sq += g * g;
    double pre = std::sqrt(sq);
    if (pre <= max_norm) return {pre, pre};
    double factor = max_norm / pre;
    double sq2 = 0.0;
    for (auto& p : params) {
        for (double& g : p.grad()) {
            g *= factor;
            sq2 += g * g;
        }
    }
    return {pre, std::sqrt(sq2)};
}

}  // namespace polypseg
