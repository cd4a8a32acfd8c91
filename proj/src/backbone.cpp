#include "polypseg/backbone.hpp"

#include <cmath>
#include <string>

namespace polypseg {

void BackboneConfig::validate() const {
    check<ConfigError>(patch_size >= 1, "backbone: patch_size must be positive");
    for (int i = 0; i < 4; ++i) {
        check<ConfigError>(embed_dims[static_cast<std::size_t>(i)] > 0 &&
                               num_heads[static_cast<std::size_t>(i)] > 0 &&
                               mlp_ratios[static_cast<std::size_t>(i)] > 0 &&
                               depths[static_cast<std::size_t>(i)] > 0 &&
                               sr_ratios[static_cast<std::size_t>(i)] > 0,
                           "backbone: stage " + std::to_string(i + 1) + " entries must be positive");
        check<ConfigError>(embed_dims[static_cast<std::size_t>(i)] %
                                   num_heads[static_cast<std::size_t>(i)] ==
                               0,
                           "backbone: embed_dims[" + std::to_string(i) +
                               "] not divisible by num_heads[" + std::to_string(i) + "]");
    }
    check<ConfigError>(drop_rate >= 0.0 && drop_rate < 1.0, "backbone: drop_rate out of range");
    check<ConfigError>(drop_path_rate >= 0.0 && drop_path_rate < 1.0,
                       "backbone: drop_path_rate out of range");
}

Tensor tokens_to_nchw(const Tensor& tokens, std::int64_t h, std::int64_t w) {
    check<ShapeError>(tokens.rank() == 3 && tokens.dim(1) == h * w,
                      "tokens_to_nchw: " + shape_str(tokens.shape()) + " vs grid " +
                          std::to_string(h) + "x" + std::to_string(w));
    Tensor g = ops::reshape(tokens, {tokens.dim(0), h, w, tokens.dim(2)});
    return ops::permute(g, {0, 3, 1, 2});
}

Tensor nchw_to_tokens(const Tensor& x) {
    check<ShapeError>(x.rank() == 4, "nchw_to_tokens: expected NCHW");
    Tensor g = ops::permute(x, {0, 2, 3, 1});
    return ops::reshape(g, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

namespace nn {

PatchEmbed::PatchEmbed(std::int64_t in, std::int64_t out, std::int64_t stride, int stage,
                       Rng& rng)
    : proj(in, out, 2 * stride - 1, stride, stride - 1, 1, true, rng),
      norm(out),
      stride(stride),
      stage_(stage) {}

Tensor PatchEmbed::forward(const Tensor& x, std::int64_t& h, std::int64_t& w,
                           const Ctx& ctx) const {
    (void)ctx;
    check<ShapeError>(x.dim(2) % stride == 0 && x.dim(3) % stride == 0,
                      "patch embed stage " + std::to_string(stage_) + ": spatial dims " +
                          std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                          " not divisible by stride " + std::to_string(stride));
    Tensor y = proj.forward(x);
    h = y.dim(2);
    w = y.dim(3);
    return norm.forward(nchw_to_tokens(y));
}

void PatchEmbed::collect(ParamMap& m, const std::string& prefix) const {
    proj.collect(m, prefix + ".proj");
    norm.collect(m, prefix + ".norm");
}

SrAttention::SrAttention(std::int64_t dim, std::int64_t heads, std::int64_t sr_ratio, double drop,
                         Rng& rng)
    : q(dim, dim, true, rng),
      k(dim, dim, true, rng),
      v(dim, dim, true, rng),
      proj(dim, dim, true, rng),
      dim(dim),
      heads(heads),
      sr_ratio(sr_ratio),
      drop_rate(drop) {
    if (sr_ratio > 1) {
        sr = Conv2d(dim, dim, sr_ratio, sr_ratio, 0, 1, true, rng);
        srnorm = LayerNorm(dim);
    }
}

Tensor SrAttention::forward(const Tensor& tokens, std::int64_t h, std::int64_t w,
                            const Ctx& ctx) const {
    std::int64_t B = tokens.dim(0), N = tokens.dim(1);
    std::int64_t hd = dim / heads;
    double scl = 1.0 / std::sqrt(static_cast<double>(hd));

    auto split_heads = [&](const Tensor& t, std::int64_t len) {
        Tensor r = ops::reshape(t, {B, len, heads, hd});
        return ops::reshape(ops::permute(r, {0, 2, 1, 3}), {B * heads, len, hd});
    };

    Tensor qt = split_heads(q.forward(tokens), N);

    Tensor kv_src = tokens;
    std::int64_t M = N;
    if (sr_ratio > 1) {
        check<ShapeError>(h % sr_ratio == 0 && w % sr_ratio == 0,
                          "sr attention: grid " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by sr_ratio " + std::to_string(sr_ratio));
        Tensor grid = tokens_to_nchw(tokens, h, w);
        Tensor red = sr.forward(grid);
        M = red.dim(2) * red.dim(3);
        kv_src = srnorm.forward(nchw_to_tokens(red));
    }
    Tensor kt = split_heads(k.forward(kv_src), M);
    Tensor vt = split_heads(v.forward(kv_src), M);

    Tensor scores = ops::scale(ops::matmul(qt, ops::permute(kt, {0, 2, 1})), scl);
    Tensor attn = ops::softmax(scores, 2);
    if (ctx.training && drop_rate > 0.0) attn = ops::dropout(attn, drop_rate, true, *ctx.rng);

    Tensor out = ops::matmul(attn, vt);  // [B*heads, N, hd]
    out = ops::reshape(out, {B, heads, N, hd});
    out = ops::reshape(ops::permute(out, {0, 2, 1, 3}), {B, N, dim});
    out = proj.forward(out);
    if (ctx.training && drop_rate > 0.0) out = ops::dropout(out, drop_rate, true, *ctx.rng);
    return out;
}

void SrAttention::collect(ParamMap& m, const std::string& prefix) const {
    q.collect(m, prefix + ".q");
    k.collect(m, prefix + ".k");
    v.collect(m, prefix + ".v");
    proj.collect(m, prefix + ".proj");
    if (sr_ratio > 1) {
        sr.collect(m, prefix + ".sr");
        srnorm.collect(m, prefix + ".srnorm");
    }
}

ConvFFN::ConvFFN(std::int64_t dim, std::int64_t hidden, double drop, Rng& rng)
    : fc1(dim, hidden, true, rng),
      fc2(hidden, dim, true, rng),
      dw(hidden, hidden, 3, 1, 1, hidden, true, rng),
      drop_rate(drop) {}

Tensor ConvFFN::forward(const Tensor& tokens, std::int64_t h, std::int64_t w,
                        const Ctx& ctx) const {
    Tensor x = fc1.forward(tokens);
    x = nchw_to_tokens(dw.forward(tokens_to_nchw(x, h, w)));
    x = ops::gelu(x);
    if (ctx.training && drop_rate > 0.0) x = ops::dropout(x, drop_rate, true, *ctx.rng);
    x = fc2.forward(x);
    if (ctx.training && drop_rate > 0.0) x = ops::dropout(x, drop_rate, true, *ctx.rng);
    return x;
}

void ConvFFN::collect(ParamMap& m, const std::string& prefix) const {
    fc1.collect(m, prefix + ".fc1");
    dw.collect(m, prefix + ".dw");
    fc2.collect(m, prefix + ".fc2");
}

EncoderBlock::EncoderBlock(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio,
                           std::int64_t sr_ratio, double drop, double drop_path, Rng& rng)
    : norm1(dim),
      norm2(dim),
      attn(dim, heads, sr_ratio, drop, rng),
      mlp(dim, dim * mlp_ratio, drop, rng),
      drop_path(drop_path) {}

Tensor EncoderBlock::forward(const Tensor& tokens, std::int64_t h, std::int64_t w,
                             const Ctx& ctx) const {
    Tensor a = attn.forward(norm1.forward(tokens), h, w, ctx);
    if (ctx.training && drop_path > 0.0) a = ops::drop_path(a, drop_path, true, *ctx.rng);
    Tensor x = ops::add(tokens, a);
    Tensor f = mlp.forward(norm2.forward(x), h, w, ctx);
    if (ctx.training && drop_path > 0.0) f = ops::drop_path(f, drop_path, true, *ctx.rng);
    return ops::add(x, f);
}

void EncoderBlock::collect(ParamMap& m, const std::string& prefix) const {
    norm1.collect(m, prefix + ".norm1");
    attn.collect(m, prefix + ".attn");
    norm2.collect(m, prefix + ".norm2");
    mlp.collect(m, prefix + ".mlp");
}

}  // namespace nn

Backbone::Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::int64_t total_blocks = 0;
    for (auto d : cfg_.depths) total_blocks += d;
    std::int64_t block_index = 0;
    std::int64_t in_ch = 3;
    for (int s = 0; s < 4; ++s) {
        auto dim = cfg_.embed_dims[static_cast<std::size_t>(s)];
        std::int64_t stride = s == 0 ? cfg_.patch_size : 2;
        stages_[static_cast<std::size_t>(s)].patch =
            nn::PatchEmbed(in_ch, dim, stride, s + 1, rng);
        for (std::int64_t j = 0; j < cfg_.depths[static_cast<std::size_t>(s)]; ++j) {
            // Drop-path rate rises linearly from 0 to drop_path_rate over
            // all blocks of the network.
            double dp = total_blocks > 1
                            ? cfg_.drop_path_rate * static_cast<double>(block_index) /
                                  static_cast<double>(total_blocks - 1)
                            : 0.0;
            stages_[static_cast<std::size_t>(s)].blocks.emplace_back(
                dim, cfg_.num_heads[static_cast<std::size_t>(s)],
                cfg_.mlp_ratios[static_cast<std::size_t>(s)],
                cfg_.sr_ratios[static_cast<std::size_t>(s)], cfg_.drop_rate, dp, rng);
            ++block_index;
        }
        stages_[static_cast<std::size_t>(s)].norm = nn::LayerNorm(dim);
        in_ch = dim;
    }
}

std::array<Tensor, 4> Backbone::forward(const Tensor& img, const nn::Ctx& ctx) const {
    check<ShapeError>(img.rank() == 4 && img.dim(1) == 3,
                      "backbone: expected [B,3,H,W], got " + shape_str(img.shape()));
    check<ShapeError>(img.dim(2) % 32 == 0 && img.dim(3) % 32 == 0,
                      "backbone: spatial dims must be divisible by 32, got " +
                          shape_str(img.shape()));
    std::array<Tensor, 4> out;
    Tensor x = img;
    for (int s = 0; s < 4; ++s) {
        const Stage& st = stages_[static_cast<std::size_t>(s)];
        std::int64_t h = 0, w = 0;
        Tensor tokens = st.patch.forward(x, h, w, ctx);
        for (const auto& blk : st.blocks) tokens = blk.forward(tokens, h, w, ctx);
        tokens = st.norm.forward(tokens);
        x = tokens_to_nchw(tokens, h, w);
        out[static_cast<std::size_t>(s)] = x;
    }
    return out;
}

void Backbone::collect(nn::ParamMap& m, const std::string& prefix) const {
    for (int s = 0; s < 4; ++s) {
        const Stage& st = stages_[static_cast<std::size_t>(s)];
        std::string sp = prefix + ".stage" + std::to_string(s + 1);
        st.patch.collect(m, sp + ".patch");
        for (std::size_t j = 0; j < st.blocks.size(); ++j)
            st.blocks[j].collect(m, sp + ".block" + std::to_string(j));
        st.norm.collect(m, sp + ".norm");
    }
}

}  // namespace polypseg
