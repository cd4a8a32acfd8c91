#pragma once

#include <array>
#include <vector>

#include "polypseg/nn.hpp"

namespace polypseg {

struct BackboneConfig {
    std::int64_t patch_size = 4;  // stage-1 stride; later stages stride 2
    std::array<std::int64_t, 4> embed_dims{64, 128, 320, 512};
    std::array<std::int64_t, 4> num_heads{1, 2, 5, 8};
    std::array<std::int64_t, 4> mlp_ratios{8, 8, 4, 4};
    std::array<std::int64_t, 4> depths{3, 4, 18, 3};
    std::array<std::int64_t, 4> sr_ratios{8, 4, 2, 1};
    double drop_rate = 0.0;
    double drop_path_rate = 0.1;

    void validate() const;
    static BackboneConfig paper() { return {}; }
    // Small configuration that keeps every architectural feature active
    // while running in seconds on a CPU.
    static BackboneConfig desk() {
        BackboneConfig c;
        c.embed_dims = {16, 32, 48, 64};
        c.num_heads = {1, 2, 4, 8};
        c.mlp_ratios = {2, 2, 2, 2};
        c.depths = {2, 2, 2, 2};
        return c;
    }
};

namespace nn {

// Strided overlapping convolution turning a feature map into a
// layer-normalized token grid.
struct PatchEmbed {
    Conv2d proj;
    LayerNorm norm;
    std::int64_t stride = 1;

    PatchEmbed() = default;
    PatchEmbed(std::int64_t in, std::int64_t out, std::int64_t stride, int stage, Rng& rng);
    // Returns tokens [B, H'*W', C] and writes the reduced grid size.
    Tensor forward(const Tensor& x, std::int64_t& h, std::int64_t& w, const Ctx& ctx) const;
    void collect(ParamMap& m, const std::string& prefix) const;

private:
    int stage_ = 0;
};

// Multi-head attention with keys/values taken from a grid spatially
// reduced by sr_ratio (strided conv + layer norm) when sr_ratio > 1.
struct SrAttention {
    Linear q, k, v, proj;
    Conv2d sr;
    LayerNorm srnorm;
    std::int64_t dim = 0, heads = 1, sr_ratio = 1;
    double drop_rate = 0.0;

    SrAttention() = default;
    SrAttention(std::int64_t dim, std::int64_t heads, std::int64_t sr_ratio, double drop,
                Rng& rng);
    Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w, const Ctx& ctx) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

// Token MLP with a depthwise 3x3 convolution between the two projections.
struct ConvFFN {
    Linear fc1, fc2;
    Conv2d dw;
    double drop_rate = 0.0;

    ConvFFN() = default;
    ConvFFN(std::int64_t dim, std::int64_t hidden, double drop, Rng& rng);
    Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w, const Ctx& ctx) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

struct EncoderBlock {
    LayerNorm norm1, norm2;
    SrAttention attn;
    ConvFFN mlp;
    double drop_path = 0.0;

    EncoderBlock() = default;
    EncoderBlock(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio,
                 std::int64_t sr_ratio, double drop, double drop_path, Rng& rng);
    Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w, const Ctx& ctx) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

}  // namespace nn

// Four-stage pyramid encoder: strides 4/8/16/32, channels embed_dims.
class Backbone {
public:
    Backbone(const BackboneConfig& cfg, Rng& rng);

    // img: [B, 3, H, W] with H, W divisible by 32. Returns X1..X4.
    std::array<Tensor, 4> forward(const Tensor& img, const nn::Ctx& ctx) const;

    void collect(nn::ParamMap& m, const std::string& prefix = "backbone") const;
    const BackboneConfig& config() const { return cfg_; }

private:
    struct Stage {
        nn::PatchEmbed patch;
        std::vector<nn::EncoderBlock> blocks;
        nn::LayerNorm norm;
    };
    BackboneConfig cfg_;
    std::array<Stage, 4> stages_;
};

// Token grid <-> NCHW helpers shared with the decoder-side code.
Tensor tokens_to_nchw(const Tensor& tokens, std::int64_t h, std::int64_t w);
Tensor nchw_to_tokens(const Tensor& x);

}  // namespace polypseg
