#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "polypseg/ops.hpp"
#include "polypseg/tensor.hpp"

namespace testutil {

using polypseg::NoGradGuard;
using polypseg::Tensor;

// Central-difference gradient check. Returns the worst relative error over
// all coordinates of all parameters; fn must be deterministic.
inline double fd_gradcheck(const std::function<Tensor()>& fn, std::vector<Tensor> params,
                           double h = 1e-5) {
    for (auto& t : params) {
        t.grad();
        t.zero_grad();
    }
    Tensor loss = fn();
    polypseg::backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& t : params) analytic.push_back(t.grad());

    double worst = 0.0;
    NoGradGuard ng;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& t = params[k];
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            double orig = t.data()[i];
            t.data()[i] = orig + h;
            double fp = fn().item();
            t.data()[i] = orig - h;
            double fm = fn().item();
            t.data()[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double a = analytic[k][static_cast<std::size_t>(i)];
            double err = std::abs(fd - a) / std::max({1.0, std::abs(fd), std::abs(a)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Sampled variant for large parameter sets: checks n_samples randomly
// chosen coordinates drawn across all parameters.
inline double fd_gradcheck_sampled(const std::function<Tensor()>& fn, std::vector<Tensor> params,
                                   int n_samples, polypseg::Rng& rng, double h = 1e-5) {
    for (auto& t : params) {
        t.grad();
        t.zero_grad();
    }
    Tensor loss = fn();
    polypseg::backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& t : params) analytic.push_back(t.grad());

    double worst = 0.0;
    NoGradGuard ng;
    for (int s = 0; s < n_samples; ++s) {
        auto k = static_cast<std::size_t>(rng.randint(static_cast<std::int64_t>(params.size())));
        auto& t = params[k];
        std::int64_t i = rng.randint(t.numel());
        double orig = t.data()[i];
        t.data()[i] = orig + h;
        double fp = fn().item();
        t.data()[i] = orig - h;
        double fm = fn().item();
        t.data()[i] = orig;
        double fd = (fp - fm) / (2.0 * h);
        double a = analytic[k][static_cast<std::size_t>(i)];
        double err = std::abs(fd - a) / std::max({1.0, std::abs(fd), std::abs(a)});
        worst = std::max(worst, err);
    }
    return worst;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return 1e30;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
    return max_abs_diff(a.values(), b);
}

}  // namespace testutil
