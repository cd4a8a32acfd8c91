#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "polypseg/common.hpp"
#include "polypseg/harness.hpp"

namespace fs = std::filesystem;
using namespace polypseg;

namespace {

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    check<IoError>(in.good(), "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// "<root>/<name>" -> manifest
DatasetManifest manifest_from_arg(const std::string& arg) {
    fs::path p(arg);
    check<ConfigError>(p.has_parent_path() && p.has_filename(),
                       "--data wants <root>/<name>, got " + arg);
    return load_manifest(p.parent_path().string(), p.filename().string());
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

void print_scores(const std::vector<std::pair<std::string, DatasetScores>>& scored) {
    std::cout << score_table_header();
    for (const auto& [name, ds] : scored) {
        std::cout << score_table_row(name, ds.mean);
        if (!ds.missing.empty()) {
            std::cout << "  (" << ds.missing.size() << " pairs missing:";
            for (const auto& m : ds.missing) std::cout << " " << m;
            std::cout << ")\n";
        }
    }
}

int run(int argc, char** argv) {
    CLI::App app{"polyp segmentation workbench"};
    app.require_subcommand(1);

    // train
    auto* cmd_train = app.add_subcommand("train", "train a model from a run spec");
    std::string config_path;
    cmd_train->add_option("--config", config_path, "run spec JSON file")->required();

    // eval
    auto* cmd_eval = app.add_subcommand("eval", "score a checkpoint on datasets");
    std::string ckpt;
    std::vector<std::string> data_args;
    std::string out_dir;
    bool gt_bypass = false;
    cmd_eval->add_option("--ckpt", ckpt, "checkpoint file");
    cmd_eval->add_option("--data", data_args, "dataset as <root>/<name>, repeatable")
        ->required();
    cmd_eval->add_option("--out", out_dir, "directory for JSON score reports");
    cmd_eval->add_flag("--gt-bypass", gt_bypass, "score each ground truth against itself");

    // ablate
    auto* cmd_ablate = app.add_subcommand("ablate", "train and score decoder variants");
    std::string ablate_config, variants_arg = "full,no_cfm,no_cim,no_sam,sam_nogcn,sam_conv";
    cmd_ablate->add_option("--config", ablate_config, "run spec JSON file")->required();
    cmd_ablate->add_option("--variants", variants_arg, "comma-separated variant names");

    // gradcheck
    auto* cmd_grad = app.add_subcommand("gradcheck", "finite-difference sweeps");
    std::string module_name = "all";
    std::uint64_t seed = 17;
    cmd_grad->add_option("--module", module_name, "backbone | decoder | losses | all");
    cmd_grad->add_option("--seed", seed, "sampling seed");

    // rotate-eval
    auto* cmd_rot = app.add_subcommand("rotate-eval", "score plain vs rotated inputs");
    std::string rot_ckpt, rot_data;
    double degrees = 15.0;
    cmd_rot->add_option("--ckpt", rot_ckpt, "checkpoint file")->required();
    cmd_rot->add_option("--data", rot_data, "dataset as <root>/<name>")->required();
    cmd_rot->add_option("--degrees", degrees, "rotation in degrees");

    // plot
    auto* cmd_plot = app.add_subcommand("plot", "loss curves and threshold-sweep curves");
    std::string logs_arg, plot_ckpt, plot_data, plot_out = ".";
    cmd_plot->add_option("--logs", logs_arg, "comma-separated training logs (loss curves)");
    cmd_plot->add_option("--ckpt", plot_ckpt, "checkpoint for a sweep curve");
    cmd_plot->add_option("--data", plot_data, "dataset as <root>/<name> for the sweep");
    cmd_plot->add_option("--out", plot_out, "output directory");

    // synth
    auto* cmd_synth = app.add_subcommand("synth", "generate a synthetic blob dataset");
    std::string synth_root = "data";
    int synth_n = 8;
    std::uint64_t synth_seed = 1;
    std::int64_t synth_size = 352;
    cmd_synth->add_option("--root", synth_root, "dataset root directory");
    cmd_synth->add_option("--n", synth_n, "number of images");
    cmd_synth->add_option("--seed", synth_seed, "generator seed");
    cmd_synth->add_option("--size", synth_size, "square image side");

    CLI11_PARSE(app, argc, argv);

    if (*cmd_train) {
        RunSpec spec = run_spec_from_json(read_text(config_path));
        DatasetManifest man = load_manifest(spec.data_root, spec.dataset);
        for (const auto& w : man.warnings) std::cerr << "warning: " << w << "\n";
        RunRecord rec = train(spec.model, spec.train, man, spec.out_dir, spec.name);
        std::printf("run %s: %zu iterations, best val mDic %.4f, train mDic %.4f, %.1fs\n",
                    rec.name.c_str(), rec.iters.size(), rec.best_val_mdic,
                    rec.final_train_mdic, rec.wall_seconds);
        std::printf("checkpoints: %s (best), %s (last)\nlog: %s\n",
                    rec.checkpoint_best.c_str(), rec.checkpoint_last.c_str(),
                    rec.log_path.c_str());
        return 0;
    }

    if (*cmd_eval) {
        check<ConfigError>(gt_bypass || !ckpt.empty(), "eval needs --ckpt unless --gt-bypass");
        std::vector<DatasetManifest> mans;
        for (const auto& a : data_args) mans.push_back(manifest_from_arg(a));
        auto scored = evaluate(ckpt, mans, gt_bypass);
        print_scores(scored);
        if (!out_dir.empty()) {
            fs::create_directories(out_dir);
            for (const auto& [name, ds] : scored) {
                std::ofstream out(fs::path(out_dir) / (name + "_scores.json"));
                out << dataset_scores_json(name, ds);
            }
        }
        return 0;
    }

    if (*cmd_ablate) {
        RunSpec spec = run_spec_from_json(read_text(ablate_config));
        DatasetManifest man = load_manifest(spec.data_root, spec.dataset);
        std::vector<Variant> variants;
        for (const auto& name : split_commas(variants_arg))
            variants.push_back(variant_from_name(name));
        AblationTable table = ablate(spec.model, variants, man, spec.train, spec.out_dir);
        std::cout << table.to_text();
        return 0;
    }

    if (*cmd_grad) {
        GradcheckReport report = gradcheck(module_name, seed);
        std::cout << report.to_text();
        return report.ok() ? 0 : 1;
    }

    if (*cmd_rot) {
        DatasetManifest man = manifest_from_arg(rot_data);
        auto [plain, rotated] = rotate_eval_run(rot_ckpt, man, degrees);
        std::cout << score_table_header() << score_table_row("plain", plain.mean)
                  << score_table_row("rotated", rotated.mean);
        std::printf("delta mDic: %+.6f\n", rotated.mean.mdic - plain.mean.mdic);
        return 0;
    }

    if (*cmd_plot) {
        fs::create_directories(plot_out);
        bool did = false;
        if (!logs_arg.empty()) {
            std::string svg = plot_loss_curves(split_commas(logs_arg),
                                               (fs::path(plot_out) / "loss_curves.svg").string());
            std::cout << "wrote " << svg << "\n";
            did = true;
        }
        if (!plot_ckpt.empty() || !plot_data.empty()) {
            check<ConfigError>(!plot_ckpt.empty() && !plot_data.empty(),
                               "sweep plots need both --ckpt and --data");
            DatasetManifest man = manifest_from_arg(plot_data);
            SweepCurve curve = sweep_curve(predictions(plot_ckpt, man));
            std::string csv = (fs::path(plot_out) / (man.name + "_froc.csv")).string();
            std::string svg = (fs::path(plot_out) / (man.name + "_froc.svg")).string();
            write_froc(curve, csv, svg);
            std::cout << "wrote " << csv << " and " << svg << "\n";
            did = true;
        }
        check<ConfigError>(did, "plot wants --logs and/or --ckpt with --data");
        return 0;
    }

    if (*cmd_synth) {
        DatasetManifest man = synth_dataset(synth_root, synth_n, synth_seed, synth_size);
        std::printf("wrote %zu pairs under %s\n", man.pairs.size(),
                    (fs::path(synth_root) / "synth").string().c_str());
        std::ofstream(fs::path(synth_root) / "synth" / "manifest.json") << manifest_json(man);
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
