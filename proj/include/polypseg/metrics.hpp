#pragma once

#include <string>
#include <utility>
#include <vector>

#include "polypseg/tensor.hpp"

namespace polypseg {

// One prediction/ground-truth comparison, the seven standard columns.
struct ScoreVector {
    double mdic = 0.0;
    double miou = 0.0;
    double wfm = 0.0;
    double sm = 0.0;
    double mem = 0.0;
    double maxem = 0.0;
    double mae = 0.0;
};

struct DatasetScores {
    std::vector<ScoreVector> per_image;
    ScoreVector mean;
    double std_mdic = 0.0;              // population std of per-image mdic
    std::vector<std::string> missing;   // pairs that could not be loaded
    bool complete = true;
};

// Threshold sweep curve: per binarization level, dataset-wide true positive
// rate and mean false-positive pixel count per image.
struct SweepCurve {
    std::vector<double> threshold;
    std::vector<double> tpr;
    std::vector<double> fp_per_image;
};

// All scoring functions take a prediction in [0,1] and a binary mask of the
// same spatial size. Accepted shapes are [H,W] or any shape whose leading
// dims are all 1 (e.g. [1,1,H,W]). Out-of-range predictions and non-binary
// masks raise ValueError; mismatched shapes raise ShapeError.

// Mean Dice / mean IoU over 256 binarization levels t_k = (k+1)/256 with
// pred >= t_k; a level where both maps are empty scores 1.
std::pair<double, double> dice_iou_sweep(const Tensor& pred, const Tensor& gt);

// Mean absolute error.
double mae_score(const Tensor& pred, const Tensor& gt);

// Weighted F-measure (beta^2 = 1): errors redistributed from background to
// the nearest foreground pixel (distance-transform based), smoothed with a
// 7x7 sigma-5 Gaussian, and attenuated away from the object boundary.
// Empty ground truth scores 1 if the prediction is identically zero, else 0.
double weighted_fmeasure(const Tensor& pred, const Tensor& gt);

// Structure measure: 0.5 * object similarity + 0.5 * centroid-quadrant
// region similarity. Degenerate all-zero / all-one masks score 1-mean(pred)
// and mean(pred) respectively.
double smeasure(const Tensor& pred, const Tensor& gt);

// Enhanced alignment measure swept over the 256 levels; returns (mean, max).
std::pair<double, double> emeasure(const Tensor& pred, const Tensor& gt);

// All seven scores at once.
ScoreVector score_pair(const Tensor& pred, const Tensor& gt);

// Min-max rescales a raw map to [0,1]; maps already in range pass through
// unchanged, out-of-range constant maps collapse to 0.5.
Tensor normalize_prediction(const Tensor& raw);

// Mean + std aggregation over per-image scores.
DatasetScores aggregate_scores(std::vector<ScoreVector> per_image);

// Loads (prediction, mask) image pairs from disk, resizes each prediction to
// its mask's resolution, and scores the set. Unreadable pairs are listed in
// `missing` and mark the result incomplete instead of throwing.
DatasetScores score_dataset(
    const std::vector<std::pair<std::string, std::string>>& pred_gt_files);

// Dataset-wide threshold sweep for curve plotting.
SweepCurve sweep_curve(const std::vector<std::pair<Tensor, Tensor>>& pairs);

// Fixed-width report table, one row per dataset.
std::string score_table_header();
std::string score_table_row(const std::string& name, const ScoreVector& s);
std::string dataset_scores_json(const std::string& name, const DatasetScores& s);

}  // namespace polypseg
