#pragma once

#include "polypseg/decoder.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

struct LossConfig {
    std::int64_t weight_window = 31;  // box-filter side for the boundary weights
    double weight_gain = 5.0;
    double eps = 1.0;  // IoU numerator/denominator smoothing

    void validate() const;
};

// Plain-number breakdown of one loss evaluation.
struct LossReport {
    double total = 0.0, main = 0.0, aux = 0.0;
    double wbce_main = 0.0, wiou_main = 0.0;
    double wbce_aux = 0.0, wiou_aux = 0.0;
};

// w = 1 + gain * |boxfilter(G) - G|: 1 inside uniform regions, elevated near
// boundaries. G must be exactly binary.
Tensor pixel_weights(const Tensor& mask, const LossConfig& cfg);

// Per-sample sum(w * bce) / sum(w), averaged over the batch. Logits form,
// stable for saturated inputs.
Tensor weighted_bce(const Tensor& logits, const Tensor& mask, const Tensor& w);

// Per-sample 1 - (sum(w*p*g) + eps) / (sum(w*(p+g-p*g)) + eps) with
// p = sigmoid(logits), averaged over the batch.
Tensor weighted_iou(const Tensor& logits, const Tensor& mask, const Tensor& w, double eps);

// Main term on p2, auxiliary term on p1, each bce + iou; p_final is not
// supervised. Returns the differentiable total and fills *report if given.
Tensor total_loss(const PredictionTriple& pred, const Tensor& mask, const LossConfig& cfg,
                  LossReport* report = nullptr);

}  // namespace polypseg
