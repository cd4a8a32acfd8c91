#include "polypseg/decoder.hpp"

#include "polypseg/common.hpp"
#include "polypseg/ops.hpp"

namespace polypseg {

Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "no_cfm") return Variant::no_cfm;
    if (s == "no_cim") return Variant::no_cim;
    if (s == "no_sam") return Variant::no_sam;
    if (s == "sam_nogcn") return Variant::sam_nogcn;
    if (s == "sam_conv") return Variant::sam_conv;
    throw ConfigError("unknown variant: " + s);
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_cfm: return "no_cfm";
        case Variant::no_cim: return "no_cim";
        case Variant::no_sam: return "no_sam";
        case Variant::sam_nogcn: return "sam_nogcn";
        case Variant::sam_conv: return "sam_conv";
    }
    throw ConfigError("unknown variant tag");
}

std::array<Variant, 6> all_variants() {
    return {Variant::full,   Variant::no_cfm,    Variant::no_cim,
            Variant::no_sam, Variant::sam_nogcn, Variant::sam_conv};
}

void DecoderConfig::validate() const {
    check<ConfigError>(channel > 0, "decoder channel must be positive");
    check<ConfigError>(sam_pool > 0 && sam_nodes > 0, "sam pool/node sides must be positive");
    check<ConfigError>(sam_nodes <= sam_pool, "sam_nodes must not exceed sam_pool");
    check<ConfigError>(sam_state > 0 && sam_state <= channel,
                       "sam_state must lie in [1, channel]");
    check<ConfigError>(sam_wz_in >= sam_state, "sam_wz_in must be at least sam_state");
    check<ConfigError>(cim_reduction > 0, "cim_reduction must be positive");
}

namespace nn {

ChannelAttention::ChannelAttention(std::int64_t channels, std::int64_t reduction, Rng& rng) {
    check<ConfigError>(channels % reduction == 0,
                       "channel attention: channels must divide by the reduction ratio");
    fc1 = Conv2d(channels, channels / reduction, 1, 1, 0, 1, false, rng);
    fc2 = Conv2d(channels / reduction, channels, 1, 1, 0, 1, false, rng);
}

Tensor ChannelAttention::forward(const Tensor& x) const {
    auto mlp = [&](const Tensor& pooled) {
        return fc2.forward(ops::relu(fc1.forward(pooled)));
    };
    Tensor gate = ops::sigmoid(ops::add(mlp(ops::global_max_pool2d(x)),
                                        mlp(ops::global_avg_pool2d(x))));
    return ops::mul(gate, x);
}

void ChannelAttention::collect(ParamMap& m, const std::string& prefix) const {
    fc1.collect(m, prefix + ".fc1");
    fc2.collect(m, prefix + ".fc2");
}

SpatialAttention::SpatialAttention(Rng& rng) { conv = Conv2d(2, 1, 7, 1, 3, 1, false, rng); }

Tensor SpatialAttention::forward(const Tensor& x) const {
    Tensor stats = ops::concat({ops::max_dim(x, 1, true), ops::mean_dim(x, 1, true)}, 1);
    return ops::mul(ops::sigmoid(conv.forward(stats)), x);
}

void SpatialAttention::collect(ParamMap& m, const std::string& prefix) const {
    conv.collect(m, prefix + ".conv");
}

Cim::Cim(std::int64_t channels, std::int64_t reduction, Rng& rng)
    : chan(channels, reduction, rng), spat(rng) {}

void Cim::collect(ParamMap& m, const std::string& prefix) const {
    chan.collect(m, prefix + ".chan");
    spat.collect(m, prefix + ".spat");
}

Cfm::Cfm(std::int64_t c, Rng& rng)
    : f1(c, c, 3, 1, rng),
      f2(c, c, 3, 1, rng),
      f3(2 * c, c, 3, 1, rng),
      f4(c, c, 3, 1, rng),
      f5(c, c, 3, 1, rng),
      f6(c, c, 3, 1, rng),
      f7(2 * c, 2 * c, 3, 1, rng),
      f8(2 * c, c, 3, 1, rng) {}

Tensor Cfm::part1(const Tensor& x3p, const Tensor& x4p, const Ctx& ctx) const {
    check(x3p.shape()[1] == x4p.shape()[1], "fusion part 1: channel widths differ");
    Tensor up = ops::bilinear_resize(x4p, x3p.shape()[2], x3p.shape()[3]);
    Tensor prod = ops::mul(f1.forward(up, ctx), x3p);
    return f3.forward(ops::concat({prod, f2.forward(up, ctx)}, 1), ctx);
}

Tensor Cfm::part2(const Tensor& x2p, const Tensor& x3p, const Tensor& x4p, const Tensor& x34,
                  const Ctx& ctx) const {
    std::int64_t h = x2p.shape()[2], w = x2p.shape()[3];
    Tensor u4 = ops::bilinear_resize(x4p, h, w);
    Tensor u3 = ops::bilinear_resize(x3p, h, w);
    Tensor u34 = ops::bilinear_resize(x34, h, w);
    Tensor prod = ops::mul(ops::mul(f4.forward(u4, ctx), f5.forward(u3, ctx)), x2p);
    Tensor cat = ops::concat({prod, f6.forward(u34, ctx)}, 1);
    return f8.forward(f7.forward(cat, ctx), ctx);
}

void Cfm::collect(ParamMap& m, const std::string& prefix) const {
    f1.collect(m, prefix + ".f1");
    f2.collect(m, prefix + ".f2");
    f3.collect(m, prefix + ".f3");
    f4.collect(m, prefix + ".f4");
    f5.collect(m, prefix + ".f5");
    f6.collect(m, prefix + ".f6");
    f7.collect(m, prefix + ".f7");
    f8.collect(m, prefix + ".f8");
}

Sam::Sam(std::int64_t t2_channels, const DecoderConfig& cfg, Rng& rng)
    : pool(cfg.sam_pool), nodes(cfg.sam_nodes), state(cfg.sam_state), variant(cfg.variant) {
    wg = ConvUnit(t2_channels, cfg.channel, 1, 0, rng);
    if (variant == Variant::no_sam) return;
    check<ConfigError>(cfg.channel >= 2, "second-channel attention needs at least 2 channels");
    wq = Conv2d(cfg.channel, state, 1, 1, 0, 1, true, rng);
    wk = Conv2d(cfg.channel, state, 1, 1, 0, 1, true, rng);
    if (variant == Variant::sam_conv) {
        mix.emplace(state, state, true, rng);
    } else if (variant != Variant::sam_nogcn) {
        gcn_node.emplace(nodes * nodes, nodes * nodes, true, rng);
        gcn_state.emplace(state, state, false, rng);
    }
    wz = Conv2d(cfg.sam_wz_in, cfg.channel, 1, 1, 0, 1, false, rng);
    if (cfg.sam_wz_in > state)
        lift.emplace(state, cfg.sam_wz_in - state, 1, 1, 0, 1, true, rng);
}

Tensor Sam::forward(const Tensor& t1, const Tensor& t2, const Ctx& ctx) const {
    check(t1.shape().size() == 4 && t2.shape().size() == 4, "sam expects NCHW inputs");
    std::int64_t b = t1.shape()[0], h = t1.shape()[2], w = t1.shape()[3];
    Tensor g = ops::bilinear_resize(wg.forward(t2, ctx), h, w);
    if (variant == Variant::no_sam) return ops::add(t1, g);

    // (b) per-pixel channel softmax, second channel as the attention map
    Tensor att = ops::narrow(ops::softmax(g, 1), 1, 1, 1);
    Tensor q = wq.forward(t1);
    Tensor k = wk.forward(t1);
    // (c) weighted pixels pooled to a node grid
    Tensor pooled = ops::adaptive_avg_pool2d(ops::mul(k, att), pool, pool);
    std::int64_t off = (pool - nodes) / 2;
    Tensor v = ops::narrow(ops::narrow(pooled, 2, off, nodes), 3, off, nodes);
    // (d) node-to-position correlation, normalized over positions
    std::int64_t n = h * w;
    Tensor vf = ops::reshape(v, {b, state, nodes * nodes});
    Tensor kf = ops::reshape(k, {b, state, n});
    Tensor f = ops::softmax(ops::matmul(ops::permute(vf, {0, 2, 1}), kf), 2);
    // (e) project Q onto the nodes, mix, reproject
    Tensor qf = ops::reshape(q, {b, state, n});
    Tensor xg = ops::matmul(qf, ops::permute(f, {0, 2, 1}));  // [b, state, nodes^2]
    Tensor mixed;
    if (gcn_node) {
        Tensor hh = ops::relu(ops::add(gcn_node->forward(xg), xg));
        mixed = ops::permute(gcn_state->forward(ops::permute(hh, {0, 2, 1})), {0, 2, 1});
    } else if (mix) {
        mixed = ops::permute(mix->forward(ops::permute(xg, {0, 2, 1})), {0, 2, 1});
    } else {
        mixed = xg;
    }
    Tensor yp = ops::reshape(ops::matmul(mixed, f), {b, state, h, w});
    // (f) residual re-entry
    if (lift) yp = ops::concat({yp, lift->forward(q)}, 1);
    return ops::add(t1, wz.forward(yp));
}

void Sam::collect(ParamMap& m, const std::string& prefix) const {
    wg.collect(m, prefix + ".wg");
    if (variant == Variant::no_sam) return;
    wq.collect(m, prefix + ".wq");
    wk.collect(m, prefix + ".wk");
    if (gcn_node) {
        gcn_node->collect(m, prefix + ".gcn.node");
        gcn_state->collect(m, prefix + ".gcn.state");
    }
    if (mix) mix->collect(m, prefix + ".mix");
    wz.collect(m, prefix + ".wz");
    if (lift) lift->collect(m, prefix + ".lift");
}

}  // namespace nn

PolypDecoder::PolypDecoder(const std::array<std::int64_t, 4>& in_dims, const DecoderConfig& cfg_in,
                           Rng& rng)
    : cfg(cfg_in) {
    cfg.validate();
    reduce2 = nn::ConvUnit(in_dims[1], cfg.channel, 3, 1, rng);
    reduce3 = nn::ConvUnit(in_dims[2], cfg.channel, 3, 1, rng);
    reduce4 = nn::ConvUnit(in_dims[3], cfg.channel, 3, 1, rng);
    if (cfg.variant != Variant::no_cfm) cfm.emplace(cfg.channel, rng);
    if (cfg.variant != Variant::no_cim) cim.emplace(in_dims[0], cfg.cim_reduction, rng);
    sam = nn::Sam(in_dims[0], cfg, rng);
    head1 = nn::Conv2d(cfg.channel, 1, 1, 1, 0, 1, true, rng);
    head2 = nn::Conv2d(cfg.channel, 1, 1, 1, 0, 1, true, rng);
}

PredictionTriple PolypDecoder::forward(const std::array<Tensor, 4>& feats, const nn::Ctx& ctx,
                                       DecoderProbe* probe) const {
    const Tensor& x1 = feats[0];
    Tensor x2p = reduce2.forward(feats[1], ctx);
    Tensor x3p = reduce3.forward(feats[2], ctx);
    Tensor x4p = reduce4.forward(feats[3], ctx);

    Tensor t1;
    if (cfm) {
        t1 = cfm->forward(x2p, x3p, x4p, ctx);
    } else {
        std::int64_t h = x2p.shape()[2], w = x2p.shape()[3];
        t1 = ops::add(ops::add(x2p, ops::bilinear_resize(x3p, h, w)),
                      ops::bilinear_resize(x4p, h, w));
    }
    Tensor t2 = cim ? cim->forward(x1) : x1;
    Tensor z = sam.forward(t1, t2, ctx);
    if (probe) *probe = {t1, t2, z};

    std::int64_t out_h = 4 * x1.shape()[2], out_w = 4 * x1.shape()[3];
    Tensor p1 = ops::bilinear_resize(head1.forward(t1), out_h, out_w);
    Tensor p2 = ops::bilinear_resize(head2.forward(z), out_h, out_w);
    return {p1, p2, ops::add(p1, p2)};
}

void PolypDecoder::collect(nn::ParamMap& m, const std::string& prefix) const {
    auto join = [&](const std::string& name) { return prefix.empty() ? name : prefix + "." + name; };
    reduce2.collect(m, join("reduce.x2"));
    reduce3.collect(m, join("reduce.x3"));
    reduce4.collect(m, join("reduce.x4"));
    if (cfm) cfm->collect(m, join("cfm"));
    if (cim) cim->collect(m, join("cim"));
    sam.collect(m, join("sam"));
    head1.collect(m, join("head.p1"));
    head2.collect(m, join("head.p2"));
}

void ModelConfig::validate() const {
    backbone.validate();
    decoder.validate();
}

PolypModel::PolypModel(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg), backbone_(cfg.backbone, rng), decoder_(cfg.backbone.embed_dims, cfg.decoder, rng) {}

PredictionTriple PolypModel::forward(const Tensor& img, const nn::Ctx& ctx) const {
    return decoder_.forward(backbone_.forward(img, ctx), ctx);
}

void PolypModel::collect(nn::ParamMap& m) const {
    backbone_.collect(m, "backbone");
    decoder_.collect(m, "");
}

}  // namespace polypseg
