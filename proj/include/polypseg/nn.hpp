#pragma once

#include <string>
#include <utility>
#include <vector>

#include "polypseg/ops.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg::nn {

// Forward-pass context: training toggles batch-norm statistics and the
// stochastic layers, which draw from rng.
struct Ctx {
    bool training = false;
    Rng* rng = nullptr;
};

// Flat registry of named tensors. Parameters are trainable; buffers
// (running statistics) are saved/loaded but not optimized.
struct ParamMap {
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> buffers;

    void param(const std::string& name, const Tensor& t) { params.emplace_back(name, t); }
    void buffer(const std::string& name, const Tensor& t) { buffers.emplace_back(name, t); }

    std::vector<std::pair<std::string, Tensor>> all() const {
        auto out = params;
        out.insert(out.end(), buffers.begin(), buffers.end());
        return out;
    }
    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params) n += t.numel();
        return n;
    }
    std::vector<std::string> param_names() const {
        std::vector<std::string> out;
        out.reserve(params.size());
        for (const auto& [name, t] : params) out.push_back(name);
        return out;
    }
};

Tensor trunc_normal_init(Shape shape, double stddev, Rng& rng);
// Normal with std sqrt(2 / fan_out), fan_out = out_c * kh * kw / groups.
Tensor kaiming_conv_init(std::int64_t out_c, std::int64_t in_cg, std::int64_t kh, std::int64_t kw,
                         std::int64_t groups, Rng& rng);

struct Linear {
    Tensor w, b;

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, bool bias, Rng& rng);
    Tensor forward(const Tensor& x) const { return ops::linear(x, w, b); }
    void collect(ParamMap& m, const std::string& prefix) const;
};

struct Conv2d {
    Tensor w, b;
    std::int64_t stride = 1, pad = 0, groups = 1;

    Conv2d() = default;
    Conv2d(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride,
           std::int64_t pad, std::int64_t groups, bool bias, Rng& rng);
    Tensor forward(const Tensor& x) const { return ops::conv2d(x, w, b, stride, pad, groups); }
    void collect(ParamMap& m, const std::string& prefix) const;
};

struct BatchNorm2d {
    Tensor gamma, beta;
    mutable Tensor running_mean, running_var;
    double momentum = 0.1, eps = 1e-5;

    BatchNorm2d() = default;
    explicit BatchNorm2d(std::int64_t c);
    Tensor forward(const Tensor& x, const Ctx& ctx) const {
        return ops::batch_norm2d(x, gamma, beta, running_mean, running_var, ctx.training,
                                 momentum, eps);
    }
    void collect(ParamMap& m, const std::string& prefix) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-6;

    LayerNorm() = default;
    explicit LayerNorm(std::int64_t d, double eps = 1e-6);
    Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }
    void collect(ParamMap& m, const std::string& prefix) const;
};

// 3x3 (configurable) convolution + batch norm + ReLU, the F(.) unit used
// throughout the decoder.
struct ConvUnit {
    Conv2d conv;
    BatchNorm2d bn;

    ConvUnit() = default;
    ConvUnit(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t pad, Rng& rng);
    Tensor forward(const Tensor& x, const Ctx& ctx) const {
        return ops::relu(bn.forward(conv.forward(x), ctx));
    }
    void collect(ParamMap& m, const std::string& prefix) const;
};

}  // namespace polypseg::nn
