#include "polypseg/losses.hpp"

#include <cmath>

#include "polypseg/common.hpp"
#include "polypseg/ops.hpp"

namespace polypseg {

namespace {

void require_finite(const Tensor& t, const char* what) {
    for (double v : t.values())
        check<ValueError>(std::isfinite(v), std::string(what) + " contains a non-finite value");
}

void require_binary(const Tensor& t) {
    for (double v : t.values())
        check<ValueError>(v == 0.0 || v == 1.0, "mask must be exactly binary");
}

// [B, ...] -> [B] sums.
Tensor per_sample_sum(const Tensor& x) {
    return ops::sum_dim(ops::reshape(x, {x.shape()[0], -1}), 1, false);
}

}  // namespace

void LossConfig::validate() const {
    check<ConfigError>(weight_window > 0 && weight_window % 2 == 1,
                       "weight_window must be odd and positive");
    check<ConfigError>(weight_gain >= 0.0, "weight_gain must be nonnegative");
    check<ConfigError>(eps > 0.0, "eps must be positive");
}

Tensor pixel_weights(const Tensor& mask, const LossConfig& cfg) {
    cfg.validate();
    check(mask.rank() == 4, "pixel_weights expects an NCHW mask");
    require_binary(mask);
    NoGradGuard ng;  // weights are data, not a gradient path
    // Box average over the in-bounds window only, so constant masks map to
    // exactly constant pools and the weights stay at 1 there.
    double k2 = static_cast<double>(cfg.weight_window * cfg.weight_window);
    Tensor sum = ops::scale(ops::avg_pool2d_samepad(mask, cfg.weight_window), k2);
    Tensor cnt = ops::scale(
        ops::avg_pool2d_samepad(Tensor::full(mask.shape(), 1.0), cfg.weight_window), k2);
    Tensor pooled = ops::div(sum, cnt);
    return ops::add_scalar(ops::scale(ops::abs(ops::sub(pooled, mask)), cfg.weight_gain), 1.0);
}

Tensor weighted_bce(const Tensor& logits, const Tensor& mask, const Tensor& w) {
    check(logits.shape() == mask.shape() && logits.shape() == w.shape(),
          "weighted_bce: shape mismatch");
    require_finite(logits, "logits");
    Tensor num = per_sample_sum(ops::mul(w, ops::bce_with_logits(logits, mask)));
    Tensor den = per_sample_sum(w);
    return ops::mean(ops::div(num, den));
}

Tensor weighted_iou(const Tensor& logits, const Tensor& mask, const Tensor& w, double eps) {
    check(logits.shape() == mask.shape() && logits.shape() == w.shape(),
          "weighted_iou: shape mismatch");
    check<ValueError>(eps > 0.0, "eps must be positive");
    require_finite(logits, "logits");
    Tensor p = ops::sigmoid(logits);
    Tensor inter = per_sample_sum(ops::mul(w, ops::mul(p, mask)));
    Tensor uni = per_sample_sum(ops::mul(w, ops::sub(ops::add(p, mask), ops::mul(p, mask))));
    Tensor frac = ops::div(ops::add_scalar(inter, eps), ops::add_scalar(uni, eps));
    return ops::mean(ops::add_scalar(ops::scale(frac, -1.0), 1.0));
}

Tensor total_loss(const PredictionTriple& pred, const Tensor& mask, const LossConfig& cfg,
                  LossReport* report) {
    check(pred.p1.shape() == mask.shape() && pred.p2.shape() == mask.shape(),
          "total_loss: predictions and mask must share one resolution");
    Tensor w = pixel_weights(mask, cfg);
    Tensor wbce_main = weighted_bce(pred.p2, mask, w);
    Tensor wiou_main = weighted_iou(pred.p2, mask, w, cfg.eps);
    Tensor wbce_aux = weighted_bce(pred.p1, mask, w);
    Tensor wiou_aux = weighted_iou(pred.p1, mask, w, cfg.eps);
    Tensor total = ops::add(ops::add(wbce_main, wiou_main), ops::add(wbce_aux, wiou_aux));
    if (report) {
        report->wbce_main = wbce_main.item();
        report->wiou_main = wiou_main.item();
        report->wbce_aux = wbce_aux.item();
        report->wiou_aux = wiou_aux.item();
        report->main = report->wbce_main + report->wiou_main;
        report->aux = report->wbce_aux + report->wiou_aux;
        report->total = report->main + report->aux;
    }
    return total;
}

}  // namespace polypseg
