#include "polypseg/nn.hpp"

#include <cmath>

namespace polypseg::nn {

Tensor trunc_normal_init(Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.values()) v = rng.trunc_normal(0.0, stddev);
    return t;
}

Tensor kaiming_conv_init(std::int64_t out_c, std::int64_t in_cg, std::int64_t kh, std::int64_t kw,
                         std::int64_t groups, Rng& rng) {
    double fan_out = static_cast<double>(kh * kw * out_c) / static_cast<double>(groups);
    double stddev = std::sqrt(2.0 / fan_out);
    Tensor t = Tensor::zeros({out_c, in_cg, kh, kw}, true);
    for (auto& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

Linear::Linear(std::int64_t in, std::int64_t out, bool bias, Rng& rng) {
    w = trunc_normal_init({out, in}, 0.02, rng);
    if (bias) b = Tensor::zeros({out}, true);
}

void Linear::collect(ParamMap& m, const std::string& prefix) const {
    m.param(prefix + ".w", w);
    if (b.defined()) m.param(prefix + ".b", b);
}

Conv2d::Conv2d(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride,
               std::int64_t pad, std::int64_t groups, bool bias, Rng& rng)
    : stride(stride), pad(pad), groups(groups) {
    check<ConfigError>(in % groups == 0 && out % groups == 0,
                       "conv: channels not divisible by groups");
    w = kaiming_conv_init(out, in / groups, k, k, groups, rng);
    if (bias) b = Tensor::zeros({out}, true);
}

void Conv2d::collect(ParamMap& m, const std::string& prefix) const {
    m.param(prefix + ".w", w);
    if (b.defined()) m.param(prefix + ".b", b);
}

BatchNorm2d::BatchNorm2d(std::int64_t c) {
    gamma = Tensor::full({c}, 1.0, true);
    beta = Tensor::zeros({c}, true);
    running_mean = Tensor::zeros({c});
    running_var = Tensor::full({c}, 1.0);
}

void BatchNorm2d::collect(ParamMap& m, const std::string& prefix) const {
    m.param(prefix + ".gamma", gamma);
    m.param(prefix + ".beta", beta);
    m.buffer(prefix + ".running_mean", running_mean);
    m.buffer(prefix + ".running_var", running_var);
}

LayerNorm::LayerNorm(std::int64_t d, double eps) : eps(eps) {
    gamma = Tensor::full({d}, 1.0, true);
    beta = Tensor::zeros({d}, true);
}

void LayerNorm::collect(ParamMap& m, const std::string& prefix) const {
    m.param(prefix + ".gamma", gamma);
    m.param(prefix + ".beta", beta);
}

ConvUnit::ConvUnit(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t pad, Rng& rng)
    : conv(in, out, k, 1, pad, 1, false, rng), bn(out) {}

void ConvUnit::collect(ParamMap& m, const std::string& prefix) const {
    conv.collect(m, prefix + ".conv");
    bn.collect(m, prefix + ".bn");
}

}  // namespace polypseg::nn
