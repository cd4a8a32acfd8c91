#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "polypseg/data.hpp"
#include "polypseg/decoder.hpp"
#include "polypseg/losses.hpp"
#include "polypseg/metrics.hpp"

namespace polypseg {

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    int epochs = 100;
    int batch = 16;
    double clip = 0.5;
    double decay_rate = 0.1;
    int decay_epoch = 50;  // epochs at or past this index use lr * decay_rate
    std::int64_t image_size = 352;
    std::string optimizer = "adamw";
    std::uint64_t seed = 0;

    void validate() const;  // ConfigError on non-positive values
};

std::string train_config_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);
std::string model_config_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

Variant variant_from_name(const std::string& name);  // ConfigError on unknown

// Declarative run description: model + training + where the data lives.
// The JSON file mirrors these field names exactly.
struct RunSpec {
    std::string name = "run";
    ModelConfig model;
    TrainConfig train;
    std::string data_root;
    std::string dataset;
    std::string out_dir = "runs/run";
};

RunSpec run_spec_from_json(const std::string& text);
std::string run_spec_json(const RunSpec& s);

struct IterRecord {
    int epoch = 0;
    int iter = 0;  // global, 1-based
    double scale = 1.0;
    double loss = 0.0;
    double grad_norm_pre = 0.0;
    double grad_norm = 0.0;  // post clip
    double lr = 0.0;
};

struct EpochRecord {
    int epoch = 0;
    LossReport mean_loss;
    double val_mdic = 0.0;
    double seconds = 0.0;
};

// Everything one training run produced. Append-only while training runs;
// reproducible bit for bit given (seed, config, data).
struct RunRecord {
    std::string name;
    TrainConfig train_cfg;
    std::string model_json;
    std::int64_t param_count = 0;
    std::vector<IterRecord> iters;
    std::vector<EpochRecord> epochs;
    ScoreVector final_val;        // full score vector, held-out split
    double final_train_mdic = 0;  // mean mDic over the images trained on
    double best_val_mdic = 0;
    double wall_seconds = 0;
    std::string checkpoint_last;
    std::string checkpoint_best;
    std::string log_path;
};

// Multi-scale AdamW training with gradient-norm clipping and one lr step
// decay. Keeps the best checkpoint by held-out mDic (a 90/10 split of the
// manifest; a single-pair manifest validates on its training image).
// Divergence (non-finite loss) aborts with the iteration logged and thrown.
RunRecord train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                const DatasetManifest& manifest, const std::string& out_dir,
                const std::string& run_name = "run");

// Checkpoint -> sigmoid(fused map) -> native-size GT scoring per dataset.
// gt_bypass scores each ground truth against itself (pipeline check); the
// checkpoint is not touched in that mode.
std::vector<std::pair<std::string, DatasetScores>> evaluate(
    const std::string& ckpt_path, const std::vector<DatasetManifest>& manifests,
    bool gt_bypass = false);

struct AblationCell {
    double mdic = 0.0;
    double miou = 0.0;
};

struct AblationTable {
    std::vector<std::string> columns;  // display names per variant
    std::vector<std::int64_t> param_counts;
    std::vector<std::string> datasets;
    std::vector<std::vector<AblationCell>> cells;  // [dataset][column]
    std::string to_text() const;
};

// Trains and scores every requested variant with the same seed and data.
AblationTable ablate(const ModelConfig& base, const std::vector<Variant>& variants,
                     const DatasetManifest& manifest, const TrainConfig& cfg,
                     const std::string& out_dir);

struct GradcheckItem {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GradcheckItem> items;
    bool ok() const;
    std::string to_text() const;
};

// Finite-difference sweeps (10 sampled parameters per item, central
// difference, double precision). module_name: backbone | decoder | losses
// | all. Unknown names raise ConfigError.
GradcheckReport gradcheck(const std::string& module_name, std::uint64_t seed);

// Loss curves from training logs (one polyline per log, legend from the
// logs' run names). Returns the SVG path.
std::string plot_loss_curves(const std::vector<std::string>& jsonl_logs,
                             const std::string& out_svg);

// Threshold-sweep operating curve as CSV plus a small SVG rendering.
void write_froc(const SweepCurve& curve, const std::string& out_csv, const std::string& out_svg);

// Native-resolution sigmoid predictions paired with the binarized ground
// truth, ready for sweep_curve or custom scoring.
std::vector<std::pair<Tensor, Tensor>> predictions(const std::string& ckpt_path,
                                                   const DatasetManifest& manifest);

// Scores a checkpoint on the manifest twice, plain and rotated by
// `degrees`, both at network resolution. 0 degrees returns two identical
// score sets because the rotation is a bit-exact identity.
std::pair<DatasetScores, DatasetScores> rotate_eval_run(const std::string& ckpt_path,
                                                        const DatasetManifest& manifest,
                                                        double degrees);

}  // namespace polypseg
