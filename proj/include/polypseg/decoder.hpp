#pragma once

#include <array>
#include <optional>
#include <string>

#include "polypseg/backbone.hpp"
#include "polypseg/nn.hpp"

namespace polypseg {

// Wiring variants used by the ablation harness.
enum class Variant { full, no_cfm, no_cim, no_sam, sam_nogcn, sam_conv };

Variant variant_from_string(const std::string& s);
std::string variant_name(Variant v);
std::array<Variant, 6> all_variants();

struct DecoderConfig {
    std::int64_t channel = 32;        // width of the reduced stage-2/3/4 maps and T1
    std::int64_t sam_pool = 6;        // adaptive-pool side before the center crop
    std::int64_t sam_nodes = 4;       // cropped node-grid side
    std::int64_t sam_state = 16;      // graph state width
    std::int64_t sam_wz_in = 16;      // Wz input width; above sam_state a lifted copy of Q is concatenated
    std::int64_t cim_reduction = 16;  // channel-attention bottleneck ratio
    Variant variant = Variant::full;

    void validate() const;
    static DecoderConfig paper() { return {}; }
    static DecoderConfig desk() {
        DecoderConfig c;
        c.channel = 16;
        c.sam_state = 8;
        c.sam_wz_in = 8;
        c.cim_reduction = 4;
        return c;
    }
};

// Logit maps at input resolution; p_final = p1 + p2 elementwise.
struct PredictionTriple {
    Tensor p1, p2, p_final;
};

namespace nn {

// Per-channel gate: sigmoid(MLP(global max pool) + MLP(global avg pool)),
// the MLP (1x1 conv bottleneck) shared between the two pooled paths.
struct ChannelAttention {
    Conv2d fc1, fc2;

    ChannelAttention() = default;
    ChannelAttention(std::int64_t channels, std::int64_t reduction, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

// Per-position gate: sigmoid(7x7 conv over [channel max, channel mean]).
struct SpatialAttention {
    Conv2d conv;

    SpatialAttention() = default;
    explicit SpatialAttention(Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

// Detail extractor over the stage-1 map: channel then spatial attention.
struct Cim {
    ChannelAttention chan;
    SpatialAttention spat;

    Cim() = default;
    Cim(std::int64_t channels, std::int64_t reduction, Rng& rng);
    Tensor forward(const Tensor& x) const { return spat.forward(chan.forward(x)); }
    void collect(ParamMap& m, const std::string& prefix) const;
};

// Two cascaded fusion stages turning the reduced stage-2/3/4 maps into a
// single stride-8 semantic map.
struct Cfm {
    ConvUnit f1, f2, f3, f4, f5, f6, f7, f8;

    Cfm() = default;
    Cfm(std::int64_t channel, Rng& rng);
    // F3(Concat(F1(up2(X4')) * X3', F2(up2(X4')))), up2 to X3' size.
    Tensor part1(const Tensor& x3p, const Tensor& x4p, const Ctx& ctx) const;
    // F8(F7(Concat(F4(up(X4')) * F5(up(X3')) * X2', F6(up(X34))))), ups to X2' size.
    Tensor part2(const Tensor& x2p, const Tensor& x3p, const Tensor& x4p, const Tensor& x34,
                 const Ctx& ctx) const;
    Tensor forward(const Tensor& x2p, const Tensor& x3p, const Tensor& x4p, const Ctx& ctx) const {
        return part2(x2p, x3p, x4p, part1(x3p, x4p, ctx), ctx);
    }
    void collect(ParamMap& m, const std::string& prefix) const;
};

// Non-local fusion of the semantic map T1 with the detail map T2 through a
// small node graph: correlation attention projects pixels onto node vectors,
// a single graph layer mixes them, and the result re-enters as a residual.
// Also hosts the wiring replacements used by the ablation variants.
struct Sam {
    Conv2d wq, wk;             // 1x1 maps of T1 to the state width
    ConvUnit wg;               // 1x1 unit reducing T2 to `channel` channels
    std::optional<Linear> gcn_node, gcn_state;
    std::optional<Linear> mix;  // sam_conv replacement for the graph layer
    Conv2d wz;                 // 1x1 back to `channel`, no bias
    std::optional<Conv2d> lift;  // lifts Q when sam_wz_in > sam_state
    std::int64_t pool = 6, nodes = 4, state = 16;
    Variant variant = Variant::full;

    Sam() = default;
    Sam(std::int64_t t2_channels, const DecoderConfig& cfg, Rng& rng);
    Tensor forward(const Tensor& t1, const Tensor& t2, const Ctx& ctx) const;
    void collect(ParamMap& m, const std::string& prefix) const;
};

}  // namespace nn

// Intermediate maps for shape checks: fused cascade output, detail path,
// graph-enhanced map.
struct DecoderProbe {
    Tensor t1, t2, z;
};

// Everything after the encoder: channel reduction, the fusion cascade, the
// attention detail path, graph fusion and the two prediction heads.
struct PolypDecoder {
    DecoderConfig cfg;
    nn::ConvUnit reduce2, reduce3, reduce4;
    std::optional<nn::Cfm> cfm;
    std::optional<nn::Cim> cim;
    nn::Sam sam;
    nn::Conv2d head1, head2;

    // in_dims holds the encoder stage widths X1..X4.
    PolypDecoder(const std::array<std::int64_t, 4>& in_dims, const DecoderConfig& cfg, Rng& rng);
    // feats are the encoder maps X1..X4; predictions upsample to 4x the
    // stride-4 grid, i.e. the encoder's input resolution.
    PredictionTriple forward(const std::array<Tensor, 4>& feats, const nn::Ctx& ctx,
                             DecoderProbe* probe = nullptr) const;
    void collect(nn::ParamMap& m, const std::string& prefix = "") const;
};

struct ModelConfig {
    BackboneConfig backbone;
    DecoderConfig decoder;

    void validate() const;
    static ModelConfig paper() { return {BackboneConfig::paper(), DecoderConfig::paper()}; }
    static ModelConfig desk() { return {BackboneConfig::desk(), DecoderConfig::desk()}; }
};

// Encoder plus decoder; the trainable unit the harness optimizes.
class PolypModel {
public:
    PolypModel(const ModelConfig& cfg, Rng& rng);

    PredictionTriple forward(const Tensor& img, const nn::Ctx& ctx) const;
    void collect(nn::ParamMap& m) const;
    const ModelConfig& config() const { return cfg_; }
    const Backbone& backbone() const { return backbone_; }
    const PolypDecoder& decoder() const { return decoder_; }

private:
    ModelConfig cfg_;
    Backbone backbone_;
    PolypDecoder decoder_;
};

}  // namespace polypseg
