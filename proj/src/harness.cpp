#include "polypseg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "polypseg/checkpoint.hpp"
#include "polypseg/common.hpp"
#include "polypseg/optim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace polypseg {

namespace {

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    check<IoError>(in.good(), "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse_json(const std::string& text, const std::string& what) {
    json j = json::parse(text, nullptr, false);
    check<IoError>(!j.is_discarded(), what + " does not parse as JSON");
    return j;
}

json train_to_obj(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},
            {"batch", c.batch},
            {"clip", c.clip},
            {"decay_rate", c.decay_rate},
            {"decay_epoch", c.decay_epoch},
            {"image_size", c.image_size},
            {"optimizer", c.optimizer},
            {"seed", c.seed}};
}

TrainConfig train_from_obj(const json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.clip = j.value("clip", c.clip);
    c.decay_rate = j.value("decay_rate", c.decay_rate);
    c.decay_epoch = j.value("decay_epoch", c.decay_epoch);
    c.image_size = j.value("image_size", c.image_size);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.seed = j.value("seed", c.seed);
    return c;
}

template <typename T, std::size_t N>
json arr_to_json(const std::array<T, N>& a) {
    json j = json::array();
    for (const auto& v : a) j.push_back(v);
    return j;
}

template <typename T, std::size_t N>
void arr_from_json(const json& j, const char* key, std::array<T, N>& a) {
    if (!j.contains(key)) return;
    check<ConfigError>(j[key].size() == N, std::string(key) + " needs exactly 4 entries");
    for (std::size_t i = 0; i < N; ++i) a[i] = j[key][i].get<T>();
}

json model_to_obj(const ModelConfig& c) {
    return {{"backbone",
             {{"patch_size", c.backbone.patch_size},
              {"embed_dims", arr_to_json(c.backbone.embed_dims)},
              {"num_heads", arr_to_json(c.backbone.num_heads)},
              {"mlp_ratios", arr_to_json(c.backbone.mlp_ratios)},
              {"depths", arr_to_json(c.backbone.depths)},
              {"sr_ratios", arr_to_json(c.backbone.sr_ratios)},
              {"drop_rate", c.backbone.drop_rate},
              {"drop_path_rate", c.backbone.drop_path_rate}}},
            {"decoder",
             {{"channel", c.decoder.channel},
              {"sam_pool", c.decoder.sam_pool},
              {"sam_nodes", c.decoder.sam_nodes},
              {"sam_state", c.decoder.sam_state},
              {"sam_wz_in", c.decoder.sam_wz_in},
              {"cim_reduction", c.decoder.cim_reduction},
              {"variant", variant_name(c.decoder.variant)}}}};
}

ModelConfig model_from_obj(const json& j) {
    ModelConfig c;
    if (j.contains("backbone")) {
        const json& b = j["backbone"];
        c.backbone.patch_size = b.value("patch_size", c.backbone.patch_size);
        arr_from_json(b, "embed_dims", c.backbone.embed_dims);
        arr_from_json(b, "num_heads", c.backbone.num_heads);
        arr_from_json(b, "mlp_ratios", c.backbone.mlp_ratios);
        arr_from_json(b, "depths", c.backbone.depths);
        arr_from_json(b, "sr_ratios", c.backbone.sr_ratios);
        c.backbone.drop_rate = b.value("drop_rate", c.backbone.drop_rate);
        c.backbone.drop_path_rate = b.value("drop_path_rate", c.backbone.drop_path_rate);
    }
    if (j.contains("decoder")) {
        const json& d = j["decoder"];
        c.decoder.channel = d.value("channel", c.decoder.channel);
        c.decoder.sam_pool = d.value("sam_pool", c.decoder.sam_pool);
        c.decoder.sam_nodes = d.value("sam_nodes", c.decoder.sam_nodes);
        c.decoder.sam_state = d.value("sam_state", c.decoder.sam_state);
        c.decoder.sam_wz_in = d.value("sam_wz_in", c.decoder.sam_wz_in);
        c.decoder.cim_reduction = d.value("cim_reduction", c.decoder.cim_reduction);
        if (d.contains("variant")) c.decoder.variant = variant_from_name(d["variant"]);
    }
    return c;
}

std::string variant_display(Variant v) {
    switch (v) {
        case Variant::full: return "Final";
        case Variant::no_cfm: return "w/o CFM";
        case Variant::no_cim: return "w/o CIM";
        case Variant::no_sam: return "w/o SAM";
        case Variant::sam_nogcn: return "SAM-noGCN";
        case Variant::sam_conv: return "SAM-convGCN";
    }
    return "?";
}

struct LoadedModel {
    ModelConfig cfg;
    std::int64_t image_size = 352;
    std::unique_ptr<PolypModel> model;
};

LoadedModel model_from_checkpoint(const std::string& ckpt_path) {
    CheckpointData data = read_checkpoint(ckpt_path);
    json meta = parse_json(data.meta, "checkpoint metadata");
    LoadedModel out;
    check<IoError>(meta.contains("model"), "checkpoint metadata lacks a model config");
    out.cfg = model_from_obj(meta["model"]);
    if (meta.contains("train")) out.image_size = meta["train"].value("image_size", out.image_size);
    Rng rng(0);
    out.model = std::make_unique<PolypModel>(out.cfg, rng);
    nn::ParamMap pm;
    out.model->collect(pm);
    strict_load(data, pm);
    return out;
}

// sigmoid of the fused logit map, [1,1,S,S] in (0,1)
Tensor predict(const PolypModel& model, const Tensor& image) {
    NoGradGuard ng;
    nn::Ctx ctx;  // eval: frozen stats, no stochastic depth
    return ops::sigmoid(model.forward(image, ctx).p_final);
}

bool all_finite(const Tensor& t) {
    for (double v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

// validation inside the training loop: a non-finite prediction scores 0 so
// the next training iteration gets to report the divergence itself
double sample_mdic(const PolypModel& model, const Sample& s) {
    Tensor pred = predict(model, s.image);
    if (!all_finite(pred)) return 0.0;
    return dice_iou_sweep(pred, s.mask).first;
}

void log_line(std::ofstream& log, const json& j) { log << j.dump() << "\n" << std::flush; }

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

// minimal line chart; series drawn in order with a fixed palette
struct ChartSeries {
    std::string name;
    std::vector<double> xs, ys;
};

void write_svg_chart(const std::string& path, const std::vector<ChartSeries>& series,
                     const std::string& xlabel, const std::string& ylabel) {
    const double w = 640, h = 400, ml = 60, mr = 16, mt = 16, mb = 44;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            if (first) {
                xmin = xmax = s.xs[i];
                ymin = ymax = s.ys[i];
                first = false;
            }
            xmin = std::min(xmin, s.xs[i]);
            xmax = std::max(xmax, s.xs[i]);
            ymin = std::min(ymin, s.ys[i]);
            ymax = std::max(ymax, s.ys[i]);
        }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
    static const char* palette[] = {"#1f6fb2", "#c23b22", "#2e8b57", "#8858aa",
                                    "#b8860b", "#444444"};
    std::ofstream out(path);
    check<IoError>(out.good(), "cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
        << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
        << h - mb << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 10
        << "\" text-anchor=\"middle\" font-size=\"13\">" << xlabel << "</text>\n";
    out << "<text x=\"14\" y=\"" << (mt + h - mb) / 2
        << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 14 "
        << (mt + h - mb) / 2 << ")\">" << ylabel << "</text>\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", xmin);
    out << "<text x=\"" << ml << "\" y=\"" << h - mb + 16 << "\" font-size=\"11\">" << buf
        << "</text>\n";
    std::snprintf(buf, sizeof(buf), "%.4g", xmax);
    out << "<text x=\"" << w - mr << "\" y=\"" << h - mb + 16
        << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof(buf), "%.4g", ymin);
    out << "<text x=\"" << ml - 6 << "\" y=\"" << h - mb
        << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof(buf), "%.4g", ymax);
    out << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 10
        << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = palette[k % 6];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.xs.size(); ++i)
            out << px(s.xs[i]) << "," << py(s.ys[i]) << " ";
        out << "\"/>\n";
        double ly = mt + 16 + 16 * static_cast<double>(k);
        out << "<line x1=\"" << w - mr - 150 << "\" y1=\"" << ly - 4 << "\" x2=\""
            << w - mr - 130 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color
            << "\" stroke-width=\"2\"/>\n"
            << "<text x=\"" << w - mr - 124 << "\" y=\"" << ly
            << "\" font-size=\"12\">" << s.name << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace

void TrainConfig::validate() const {
    check<ConfigError>(lr > 0 && weight_decay >= 0 && clip > 0 && decay_rate > 0,
                       "training rates must be positive");
    check<ConfigError>(epochs >= 0 && batch > 0 && decay_epoch > 0, "counts must be positive");
    check<ConfigError>(image_size > 0 && image_size % 32 == 0,
                       "image_size must be a positive multiple of 32");
    check<ConfigError>(optimizer == "adamw", "only the adamw optimizer is wired");
}

std::string train_config_json(const TrainConfig& c) { return train_to_obj(c).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
    return train_from_obj(parse_json(text, "train config"));
}

std::string model_config_json(const ModelConfig& c) { return model_to_obj(c).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
    return model_from_obj(parse_json(text, "model config"));
}

Variant variant_from_name(const std::string& name) {
    for (Variant v : all_variants())
        if (variant_name(v) == name) return v;
    throw ConfigError("unknown variant: " + name);
}

RunSpec run_spec_from_json(const std::string& text) {
    json j = parse_json(text, "run spec");
    RunSpec s;
    s.name = j.value("name", s.name);
    if (j.contains("model")) s.model = model_from_obj(j["model"]);
    if (j.contains("train")) s.train = train_from_obj(j["train"]);
    s.data_root = j.value("data_root", s.data_root);
    s.dataset = j.value("dataset", s.dataset);
    s.out_dir = j.value("out_dir", s.out_dir);
    return s;
}

std::string run_spec_json(const RunSpec& s) {
    json j = {{"name", s.name},          {"model", model_to_obj(s.model)},
              {"train", train_to_obj(s.train)}, {"data_root", s.data_root},
              {"dataset", s.dataset},    {"out_dir", s.out_dir}};
    return j.dump(2);
}

RunRecord train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                const DatasetManifest& manifest, const std::string& out_dir,
                const std::string& run_name) {
    model_cfg.validate();
    cfg.validate();
    check<ConfigError>(!manifest.pairs.empty(), "train needs a non-empty manifest");
    fs::create_directories(out_dir);

    double t0 = now_seconds();
    Rng rng(cfg.seed);
    Rng init_rng = rng.fork();
    PolypModel model(model_cfg, init_rng);
    nn::ParamMap pm;
    model.collect(pm);
    std::vector<Tensor> params;
    params.reserve(pm.params.size());
    for (auto& [name, t] : pm.params) params.push_back(t);
    AdamW opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

    RunRecord rec;
    rec.name = run_name;
    rec.train_cfg = cfg;
    rec.model_json = model_config_json(model_cfg);
    rec.param_count = pm.param_count();
    rec.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    rec.checkpoint_last = (fs::path(out_dir) / "ckpt_last.bin").string();
    rec.checkpoint_best = (fs::path(out_dir) / "ckpt_best.bin").string();

    std::ofstream log(rec.log_path);
    check<IoError>(log.good(), "cannot write " + rec.log_path);
    log_line(log, {{"type", "meta"},
                   {"name", run_name},
                   {"dataset", manifest.name},
                   {"images", manifest.pairs.size()},
                   {"params", rec.param_count},
                   {"train", train_to_obj(cfg)},
                   {"model", model_to_obj(model_cfg)}});

    // 90/10 held-out split; one image keeps itself as its own check
    std::vector<std::size_t> order(manifest.pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.randint(
                                    static_cast<std::int64_t>(i)))]);
    std::size_t val_n = order.size() >= 2 ? std::max<std::size_t>(1, order.size() / 10) : 0;
    std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<long>(val_n));
    std::vector<std::size_t> val_idx(order.end() - static_cast<long>(val_n), order.end());
    if (val_idx.empty()) val_idx = train_idx;

    DataConfig dcfg;
    dcfg.base_size = cfg.image_size;

    auto save = [&](const std::string& path, int epoch, double val_mdic) {
        json meta = {{"model", model_to_obj(model_cfg)},
                     {"train", train_to_obj(cfg)},
                     {"name", run_name},
                     {"epoch", epoch},
                     {"val_mdic", val_mdic}};
        write_checkpoint(path, meta.dump(), pm.all());
    };

    if (cfg.epochs == 0) {
        save(rec.checkpoint_last, 0, 0.0);
        save(rec.checkpoint_best, 0, 0.0);
        log_line(log, {{"type", "done"}, {"epochs", 0}});
        rec.wall_seconds = now_seconds() - t0;
        std::ofstream(fs::path(out_dir) / "run_record.json")
            << json{{"name", run_name}, {"param_count", rec.param_count}, {"epochs", 0}}.dump(2);
        return rec;
    }

    const double scales[3] = {0.75, 1.0, 1.25};
    const double lr0 = cfg.lr;
    int iter_global = 0;
    rec.best_val_mdic = -1.0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double te = now_seconds();
        opt.set_lr(epoch >= cfg.decay_epoch ? lr0 * cfg.decay_rate : lr0);
        for (std::size_t i = train_idx.size(); i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[static_cast<std::size_t>(rng.randint(
                                            static_cast<std::int64_t>(i)))]);
        LossReport sum_rep;
        int n_iters = 0;
        for (std::size_t start = 0; start < train_idx.size();
             start += static_cast<std::size_t>(cfg.batch)) {
            double scale = scales[rng.randint(3)];
            std::vector<Tensor> imgs, msks;
            {
                NoGradGuard ng;
                std::size_t stop = std::min(train_idx.size(),
                                            start + static_cast<std::size_t>(cfg.batch));
                for (std::size_t k = start; k < stop; ++k) {
                    Sample s = make_sample(manifest.pairs[train_idx[k]], true, scale, dcfg);
                    imgs.push_back(s.image);
                    msks.push_back(s.mask);
                }
            }
            Tensor image = imgs.size() == 1 ? imgs[0] : ops::concat(imgs, 0);
            Tensor mask = msks.size() == 1 ? msks[0] : ops::concat(msks, 0);
            nn::Ctx ctx{true, &rng};
            PredictionTriple pred = model.forward(image, ctx);
            ++iter_global;
            auto finite = [](const Tensor& t) {
                for (double v : t.values())
                    if (!std::isfinite(v)) return false;
                return true;
            };
            LossReport rep;
            Tensor loss;
            bool healthy = finite(pred.p1) && finite(pred.p2);
            if (healthy) {
                loss = total_loss(pred, mask, LossConfig{}, &rep);
                healthy = std::isfinite(loss.item());
            }
            if (!healthy) {
                log_line(log, {{"type", "abort"},
                               {"epoch", epoch},
                               {"iter", iter_global},
                               {"reason", "non-finite loss"}});
                throw ValueError("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch) + " iteration " +
                                 std::to_string(iter_global));
            }
            opt.zero_grad();
            backward(loss);
            auto [pre, post] = clip_grad_norm(params, cfg.clip);
            opt.step();

            IterRecord ir{epoch, iter_global, scale, loss.item(), pre, post, opt.lr()};
            rec.iters.push_back(ir);
            log_line(log, {{"type", "iter"},
                           {"epoch", epoch},
                           {"iter", iter_global},
                           {"scale", scale},
                           {"loss", ir.loss},
                           {"main", rep.main},
                           {"aux", rep.aux},
                           {"grad_pre", pre},
                           {"grad_post", post},
                           {"lr", opt.lr()}});
            sum_rep.total += rep.total;
            sum_rep.main += rep.main;
            sum_rep.aux += rep.aux;
            sum_rep.wbce_main += rep.wbce_main;
            sum_rep.wiou_main += rep.wiou_main;
            sum_rep.wbce_aux += rep.wbce_aux;
            sum_rep.wiou_aux += rep.wiou_aux;
            ++n_iters;
        }
        double val_mdic = 0.0;
        {
            NoGradGuard ng;
            for (std::size_t k : val_idx)
                val_mdic += sample_mdic(model, make_sample(manifest.pairs[k], false, 1.0, dcfg));
            val_mdic /= static_cast<double>(val_idx.size());
        }
        EpochRecord er;
        er.epoch = epoch;
        er.mean_loss = sum_rep;
        if (n_iters > 0) {
            double inv = 1.0 / n_iters;
            er.mean_loss.total *= inv;
            er.mean_loss.main *= inv;
            er.mean_loss.aux *= inv;
            er.mean_loss.wbce_main *= inv;
            er.mean_loss.wiou_main *= inv;
            er.mean_loss.wbce_aux *= inv;
            er.mean_loss.wiou_aux *= inv;
        }
        er.val_mdic = val_mdic;
        er.seconds = now_seconds() - te;
        rec.epochs.push_back(er);
        log_line(log, {{"type", "epoch"},
                       {"epoch", epoch},
                       {"loss", er.mean_loss.total},
                       {"val_mdic", val_mdic},
                       {"seconds", er.seconds}});
        save(rec.checkpoint_last, epoch, val_mdic);
        if (val_mdic > rec.best_val_mdic) {
            rec.best_val_mdic = val_mdic;
            save(rec.checkpoint_best, epoch, val_mdic);
        }
    }

    {
        NoGradGuard ng;
        double tm = 0.0;
        for (std::size_t k : train_idx)
            tm += sample_mdic(model, make_sample(manifest.pairs[k], false, 1.0, dcfg));
        rec.final_train_mdic = tm / static_cast<double>(train_idx.size());
        std::vector<ScoreVector> vs;
        for (std::size_t k : val_idx) {
            Sample s = make_sample(manifest.pairs[k], false, 1.0, dcfg);
            Tensor pred = predict(model, s.image);
            vs.push_back(all_finite(pred) ? score_pair(pred, s.mask) : ScoreVector{});
        }
        rec.final_val = aggregate_scores(vs).mean;
    }
    rec.wall_seconds = now_seconds() - t0;
    log_line(log, {{"type", "done"},
                   {"train_mdic", rec.final_train_mdic},
                   {"best_val_mdic", rec.best_val_mdic},
                   {"seconds", rec.wall_seconds}});
    std::ofstream(fs::path(out_dir) / "run_record.json") << json{
        {"name", run_name},
        {"param_count", rec.param_count},
        {"epochs", cfg.epochs},
        {"iters", rec.iters.size()},
        {"train_mdic", rec.final_train_mdic},
        {"best_val_mdic", rec.best_val_mdic},
        {"val_scores",
         json::parse(dataset_scores_json("val", DatasetScores{{}, rec.final_val, 0.0, {}, true}))},
        {"seconds", rec.wall_seconds}}.dump(2);
    return rec;
}

std::vector<std::pair<std::string, DatasetScores>> evaluate(
    const std::string& ckpt_path, const std::vector<DatasetManifest>& manifests,
    bool gt_bypass) {
    LoadedModel lm;
    if (!gt_bypass) lm = model_from_checkpoint(ckpt_path);
    DataConfig dcfg;
    if (!gt_bypass) dcfg.base_size = lm.image_size;
    NoGradGuard ng;
    std::vector<std::pair<std::string, DatasetScores>> out;
    for (const auto& man : manifests) {
        std::vector<ScoreVector> per;
        DatasetScores ds;
        for (const auto& pair : man.pairs) {
            try {
                Tensor gt = load_mask_native(pair.mask);
                if (gt_bypass) {
                    per.push_back(score_pair(gt, gt));
                    continue;
                }
                Sample s = make_sample(pair, false, 1.0, dcfg);
                Tensor pred = predict(*lm.model, s.image);
                pred = ops::bilinear_resize(pred, gt.dim(0), gt.dim(1));
                per.push_back(score_pair(pred, gt));
            } catch (const IoError&) {
                ds.missing.push_back(pair.stem);
            }
        }
        DatasetScores agg = aggregate_scores(per);
        agg.missing = ds.missing;
        agg.complete = ds.missing.empty();
        out.emplace_back(man.name, agg);
    }
    return out;
}

std::string AblationTable::to_text() const {
    std::ostringstream os;
    os << "dataset      metric ";
    for (const auto& c : columns) {
        os.width(14);
        os << std::right << c;
    }
    os << "\n";
    for (std::size_t d = 0; d < datasets.size(); ++d) {
        for (int m = 0; m < 2; ++m) {
            char row[64];
            std::snprintf(row, sizeof(row), "%-12s %-6s", datasets[d].c_str(),
                          m == 0 ? "mDic" : "mIoU");
            os << row;
            for (const auto& cell : cells[d]) {
                os.width(14);
                os << std::right << fmt3(m == 0 ? cell.mdic : cell.miou);
            }
            os << "\n";
        }
    }
    os << "params             ";
    for (auto p : param_counts) {
        os.width(14);
        os << std::right << p;
    }
    os << "\n";
    return os.str();
}

AblationTable ablate(const ModelConfig& base, const std::vector<Variant>& variants,
                     const DatasetManifest& manifest, const TrainConfig& cfg,
                     const std::string& out_dir) {
    check<ConfigError>(!variants.empty(), "ablate needs at least one variant");
    AblationTable table;
    table.datasets.push_back(manifest.name);
    table.cells.emplace_back();
    for (Variant v : variants) {
        ModelConfig mc = base;
        mc.decoder.variant = v;
        std::string dir = (fs::path(out_dir) / variant_name(v)).string();
        RunRecord rr = train(mc, cfg, manifest, dir, variant_name(v));
        auto scored = evaluate(rr.checkpoint_best, {manifest});
        table.columns.push_back(variant_display(v));
        table.param_counts.push_back(rr.param_count);
        const ScoreVector& m = scored[0].second.mean;
        table.cells[0].push_back({m.mdic, m.miou});
    }
    return table;
}

bool GradcheckReport::ok() const {
    for (const auto& it : items)
        if (!it.pass) return false;
    return !items.empty();
}

std::string GradcheckReport::to_text() const {
    std::ostringstream os;
    for (const auto& it : items) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-22s max rel err %.3e  tol %.0e  %s\n",
                      it.name.c_str(), it.max_rel_err, it.tol, it.pass ? "pass" : "FAIL");
        os << buf;
    }
    return os.str();
}

namespace {

// same error convention as the fd tests: |fd - a| / max(1, |fd|, |a|)
double fd_sampled(const std::function<double()>& fn, std::vector<Tensor> params,
                  const std::vector<std::vector<double>>& analytic, int n_samples, Rng& rng,
                  double h = 1e-5) {
    double worst = 0.0;
    NoGradGuard ng;
    for (int s = 0; s < n_samples; ++s) {
        auto k = static_cast<std::size_t>(rng.randint(static_cast<std::int64_t>(params.size())));
        auto& t = params[k];
        std::int64_t i = rng.randint(t.numel());
        double orig = t.data()[i];
        t.data()[i] = orig + h;
        double fp = fn();
        t.data()[i] = orig - h;
        double fm = fn();
        t.data()[i] = orig;
        double fd = (fp - fm) / (2.0 * h);
        double a = analytic[k][static_cast<std::size_t>(i)];
        worst = std::max(worst, std::abs(fd - a) / std::max({1.0, std::abs(fd), std::abs(a)}));
    }
    return worst;
}

GradcheckItem run_suite(const std::string& name, const std::function<Tensor()>& loss_fn,
                        const std::vector<Tensor>& params, Rng& rng) {
    GradcheckItem item;
    item.name = name;
    item.tol = 1e-3;
    if (params.empty()) {
        item.pass = true;  // variant without this submodule
        return item;
    }
    std::vector<Tensor> ps = params;
    for (auto& t : ps) {
        t.grad();
        t.zero_grad();
    }
    Tensor loss = loss_fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(ps.size());
    for (auto& t : ps) analytic.push_back(t.grad());
    auto scalar_fn = [&]() { return loss_fn().item(); };
    item.max_rel_err = fd_sampled(scalar_fn, ps, analytic, 10, rng);
    item.pass = item.max_rel_err < item.tol;
    return item;
}

std::vector<Tensor> params_matching(const nn::ParamMap& pm, const std::string& needle) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : pm.params)
        if (needle.empty() || name.find(needle) != std::string::npos) out.push_back(t);
    return out;
}

}  // namespace

GradcheckReport gradcheck(const std::string& module_name, std::uint64_t seed) {
    check<ConfigError>(module_name == "backbone" || module_name == "decoder" ||
                           module_name == "losses" || module_name == "all",
                       "unknown module: " + module_name + " (backbone | decoder | losses | all)");
    GradcheckReport report;
    Rng rng(seed);

    if (module_name == "backbone" || module_name == "all") {
        Rng init = rng.fork();
        Backbone bb(BackboneConfig::desk(), init);
        Tensor x = Tensor::randn({1, 3, 32, 32}, rng, 0.5);
        std::array<Tensor, 4> proj;
        {
            NoGradGuard ng;
            nn::Ctx probe;
            auto feats = bb.forward(x, probe);
            for (int i = 0; i < 4; ++i) proj[static_cast<std::size_t>(i)] =
                Tensor::randn(feats[static_cast<std::size_t>(i)].shape(), rng, 1.0);
        }
        auto loss_fn = [&]() {
            nn::Ctx ctx;  // eval mode keeps the pass deterministic
            auto feats = bb.forward(x, ctx);
            Tensor acc = ops::sum(ops::mul(feats[0], proj[0]));
            for (std::size_t i = 1; i < 4; ++i)
                acc = ops::add(acc, ops::sum(ops::mul(feats[i], proj[i])));
            return acc;
        };
        nn::ParamMap pm;
        bb.collect(pm, "backbone");
        report.items.push_back(run_suite("backbone", loss_fn, params_matching(pm, ""), rng));
    }

    if (module_name == "decoder" || module_name == "all") {
        Rng init = rng.fork();
        BackboneConfig bc = BackboneConfig::desk();
        PolypDecoder dec(bc.embed_dims, DecoderConfig::desk(), init);
        std::array<Tensor, 4> feats;
        for (int i = 0; i < 4; ++i) {
            std::int64_t side = 16 >> i;  // strides 4/8/16/32 of a 64 input
            feats[static_cast<std::size_t>(i)] =
                Tensor::randn({1, bc.embed_dims[static_cast<std::size_t>(i)], side, side}, rng,
                              0.5);
        }
        Tensor proj;
        {
            NoGradGuard ng;
            nn::Ctx probe;
            proj = Tensor::randn(dec.forward(feats, probe).p_final.shape(), rng, 1.0);
        }
        auto loss_fn = [&]() {
            nn::Ctx ctx;
            auto out = dec.forward(feats, ctx);
            return ops::add(ops::sum(ops::mul(out.p_final, proj)),
                            ops::mean(ops::mul(out.p1, proj)));
        };
        nn::ParamMap pm;
        dec.collect(pm, "decoder");
        for (const char* part : {"cfm", "cim", "sam"})
            report.items.push_back(run_suite(std::string("decoder.") + part, loss_fn,
                                             params_matching(pm, std::string(".") + part + "."),
                                             rng));
        report.items.push_back(run_suite("decoder.heads", loss_fn,
                                         params_matching(pm, "head"), rng));
    }

    if (module_name == "losses" || module_name == "all") {
        Tensor p1 = Tensor::randn({2, 1, 8, 8}, rng, 1.5, true);
        Tensor p2 = Tensor::randn({2, 1, 8, 8}, rng, 1.5, true);
        std::vector<double> mv(2 * 64);
        for (double& v : mv) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        Tensor mask = Tensor::from_data({2, 1, 8, 8}, std::move(mv));
        auto loss_fn = [&]() {
            PredictionTriple pred{p1, p2, ops::add(p1, p2)};
            return total_loss(pred, mask, LossConfig{});
        };
        report.items.push_back(run_suite("losses", loss_fn, {p1, p2}, rng));
    }

    return report;
}

std::string plot_loss_curves(const std::vector<std::string>& jsonl_logs,
                             const std::string& out_svg) {
    check<ConfigError>(!jsonl_logs.empty(), "no logs to plot");
    std::vector<ChartSeries> series;
    for (const auto& path : jsonl_logs) {
        ChartSeries s;
        s.name = fs::path(path).parent_path().filename().string();
        std::ifstream in(path);
        check<IoError>(in.good(), "cannot open " + path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded()) continue;
            std::string type = j.value("type", "");
            if (type == "meta" && j.contains("name")) s.name = j["name"].get<std::string>();
            if (type == "iter") {
                s.xs.push_back(j.value("iter", 0.0));
                s.ys.push_back(j.value("loss", 0.0));
            }
        }
        check<ConfigError>(!s.xs.empty(), "log has no iterations: " + path);
        series.push_back(std::move(s));
    }
    write_svg_chart(out_svg, series, "iteration", "loss");
    return out_svg;
}

void write_froc(const SweepCurve& curve, const std::string& out_csv, const std::string& out_svg) {
    std::ofstream csv(out_csv);
    check<IoError>(csv.good(), "cannot write " + out_csv);
    csv << "threshold,tpr,fp_per_image\n";
    char buf[96];
    for (std::size_t i = 0; i < curve.threshold.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", curve.threshold[i], curve.tpr[i],
                      curve.fp_per_image[i]);
        csv << buf;
    }
    ChartSeries s;
    s.name = "sweep";
    s.xs = curve.fp_per_image;
    s.ys = curve.tpr;
    write_svg_chart(out_svg, {s}, "false positives per image", "true positive rate");
}

std::vector<std::pair<Tensor, Tensor>> predictions(const std::string& ckpt_path,
                                                   const DatasetManifest& manifest) {
    LoadedModel lm = model_from_checkpoint(ckpt_path);
    DataConfig dcfg;
    dcfg.base_size = lm.image_size;
    NoGradGuard ng;
    std::vector<std::pair<Tensor, Tensor>> out;
    for (const auto& pair : manifest.pairs) {
        Tensor gt = load_mask_native(pair.mask);
        Sample s = make_sample(pair, false, 1.0, dcfg);
        Tensor pred = predict(*lm.model, s.image);
        out.emplace_back(ops::bilinear_resize(pred, gt.dim(0), gt.dim(1)), gt);
    }
    return out;
}

std::pair<DatasetScores, DatasetScores> rotate_eval_run(const std::string& ckpt_path,
                                                        const DatasetManifest& manifest,
                                                        double degrees) {
    LoadedModel lm = model_from_checkpoint(ckpt_path);
    DataConfig dcfg;
    dcfg.base_size = lm.image_size;
    NoGradGuard ng;
    std::vector<ScoreVector> plain, rotated;
    for (const auto& pair : manifest.pairs) {
        Sample s = make_sample(pair, false, 1.0, dcfg);
        plain.push_back(score_pair(predict(*lm.model, s.image), s.mask));
        Sample r = rotate_eval(s, degrees);
        rotated.push_back(score_pair(predict(*lm.model, r.image), r.mask));
    }
    return {aggregate_scores(plain), aggregate_scores(rotated)};
}

}  // namespace polypseg
