// Acceptance gate: one pass/fail line per criterion, exit code = number of
// failures. Criteria 2 and 4 delegate to the oracle test binaries living in
// the same directory as this executable; everything else runs in process.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "polypseg/data.hpp"
#include "polypseg/decoder.hpp"
#include "polypseg/harness.hpp"
#include "polypseg/metrics.hpp"
#include "polypseg/rng.hpp"

namespace fs = std::filesystem;
using namespace polypseg;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Runs a sibling test binary; pass means exit status 0.
Outcome run_binary(const fs::path& exe) {
    if (!fs::exists(exe)) return {false, exe.filename().string() + " not built"};
    std::string cmd = exe.string() + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return {false, "could not launch " + exe.filename().string()};
    std::string out;
    char buf[512];
    while (std::fgets(buf, sizeof(buf), pipe)) out += buf;
    int status = pclose(pipe);
    bool ok = status == 0;
    std::string assertions;
    std::istringstream lines(out);
    for (std::string line; std::getline(lines, line);)
        if (line.find("assertions:") != std::string::npos) assertions = line;
    return {ok, ok ? assertions : out.substr(out.size() > 400 ? out.size() - 400 : 0)};
}

bool same_shape(const Tensor& t, std::vector<std::int64_t> want) {
    return t.shape() == want;
}

std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape().size(); ++i)
        s += (i ? "," : "") + std::to_string(t.shape()[i]);
    return s + "]";
}

// Criterion 1: documented pyramid shapes at both configs, decoder tap
// strides, three full-resolution logit maps, desk forward under a minute.
Outcome shape_suite() {
    NoGradGuard ng;
    nn::Ctx ctx;

    Rng rng(7);
    PolypModel paper(ModelConfig::paper(), rng);
    Tensor img = Tensor::randn({1, 3, 352, 352}, rng);
    auto feats = paper.backbone().forward(img, ctx);
    std::vector<std::vector<std::int64_t>> want = {
        {1, 64, 88, 88}, {1, 128, 44, 44}, {1, 320, 22, 22}, {1, 512, 11, 11}};
    for (int i = 0; i < 4; ++i)
        if (!same_shape(feats[i], want[i]))
            return {false, "paper stage " + std::to_string(i + 1) + " is " + shape_str(feats[i])};
    DecoderProbe probe;
    PredictionTriple pred = paper.decoder().forward(feats, ctx, &probe);
    if (!same_shape(probe.t1, {1, 32, 44, 44})) return {false, "paper t1 " + shape_str(probe.t1)};
    if (!same_shape(probe.t2, {1, 64, 88, 88})) return {false, "paper t2 " + shape_str(probe.t2)};
    if (!same_shape(probe.z, {1, 32, 44, 44})) return {false, "paper z " + shape_str(probe.z)};
    for (const Tensor* p : {&pred.p1, &pred.p2, &pred.p_final})
        if (!same_shape(*p, {1, 1, 352, 352})) return {false, "paper logits " + shape_str(*p)};

    auto t0 = std::chrono::steady_clock::now();
    Rng rng2(7);
    PolypModel desk(ModelConfig::desk(), rng2);
    Tensor img2 = Tensor::randn({1, 3, 64, 64}, rng2);
    auto feats2 = desk.backbone().forward(img2, ctx);
    std::vector<std::vector<std::int64_t>> want2 = {
        {1, 16, 16, 16}, {1, 32, 8, 8}, {1, 48, 4, 4}, {1, 64, 2, 2}};
    for (int i = 0; i < 4; ++i)
        if (!same_shape(feats2[i], want2[i]))
            return {false, "desk stage " + std::to_string(i + 1) + " is " + shape_str(feats2[i])};
    DecoderProbe probe2;
    PredictionTriple pred2 = desk.decoder().forward(feats2, ctx, &probe2);
    if (!same_shape(probe2.t1, {1, 16, 8, 8})) return {false, "desk t1 " + shape_str(probe2.t1)};
    if (!same_shape(probe2.t2, {1, 16, 16, 16})) return {false, "desk t2 " + shape_str(probe2.t2)};
    if (!same_shape(probe2.z, {1, 16, 8, 8})) return {false, "desk z " + shape_str(probe2.z)};
    for (const Tensor* p : {&pred2.p1, &pred2.p2, &pred2.p_final})
        if (!same_shape(*p, {1, 1, 64, 64})) return {false, "desk logits " + shape_str(*p)};
    double desk_s = seconds_since(t0);
    if (desk_s >= 60.0) return {false, "desk forward took " + std::to_string(desk_s) + "s"};

    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "pyramids + T1/T2/Z strides + 3 full-res maps at 352 and 64; desk %.1fs < 60s",
                  desk_s);
    return {true, buf};
}

// Criterion 3: finite-difference pass over losses and every decoder module
// (backbone included for good measure) at 1e-3 relative error.
Outcome gradient_suite() {
    GradcheckReport rep = gradcheck("all", 17);
    if (rep.items.empty()) return {false, "no gradcheck items ran"};
    double worst = 0.0;
    for (const auto& it : rep.items) {
        worst = std::max(worst, it.max_rel_err);
        if (it.tol != 1e-3) return {false, it.name + " uses tol " + std::to_string(it.tol)};
    }
    if (!rep.ok()) return {false, rep.to_text()};
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%zu modules, worst rel err %.2e < 1e-3", rep.items.size(),
                  worst);
    return {true, buf};
}

// Criterion 4 (inline half): a prediction equal to the ground truth scores
// exactly (1,1,1,1,1,1,0) across all seven columns.
Outcome perfect_score_check() {
    Rng rng(11);
    std::vector<double> m(16 * 16);
    for (double& v : m) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    m[0] = 1.0;  // keep the mask non-empty
    Tensor gt = Tensor::from_data({16, 16}, m);
    ScoreVector s = score_pair(gt, gt);
    bool exact = s.mdic == 1.0 && s.miou == 1.0 && s.wfm == 1.0 && s.sm == 1.0 && s.mem == 1.0 &&
                 s.maxem == 1.0 && s.mae == 0.0;
    if (!exact) {
        char buf[200];
        std::snprintf(buf, sizeof(buf), "pred=GT scored (%g,%g,%g,%g,%g,%g,%g)", s.mdic, s.miou,
                      s.wfm, s.sm, s.mem, s.maxem, s.mae);
        return {false, buf};
    }
    return {true, "pred=GT scores exactly (1,1,1,1,1,1,0)"};
}

// Criterion 5: desk model overfits the 8-image synthetic set to train mDic
// >= 0.95 within 200 iterations and well under the 10 minute ceiling.
Outcome overfit_test(const fs::path& scratch, std::string& ckpt_out, DatasetManifest& man_out) {
    DatasetManifest man = synth_dataset((scratch / "synth").string(), 8, 4, 64);
    TrainConfig cfg;
    cfg.lr = 2e-3;
    cfg.epochs = 200;
    cfg.batch = 8;
    cfg.decay_epoch = 1000;  // hold the lr for the whole run
    cfg.image_size = 64;
    cfg.seed = 1;
    RunRecord rec = train(ModelConfig::desk(), cfg, man, (scratch / "overfit").string(), "overfit");
    ckpt_out = rec.checkpoint_last;
    man_out = man;
    if (rec.iters.size() > 200)
        return {false, "took " + std::to_string(rec.iters.size()) + " iterations"};
    if (rec.wall_seconds >= 600.0)
        return {false, "took " + std::to_string(rec.wall_seconds) + "s"};
    if (rec.final_train_mdic < 0.95) {
        char buf[120];
        std::snprintf(buf, sizeof(buf), "train mDic %.4f after %zu iterations", rec.final_train_mdic,
                      rec.iters.size());
        return {false, buf};
    }
    char buf[120];
    std::snprintf(buf, sizeof(buf), "train mDic %.4f in %zu iterations, %.0fs < 600s",
                  rec.final_train_mdic, rec.iters.size(), rec.wall_seconds);
    return {true, buf};
}

std::vector<std::string> decoder_names(Variant v) {
    DecoderConfig cfg = DecoderConfig::desk();
    cfg.variant = v;
    Rng rng(5);
    PolypDecoder dec({16, 32, 48, 64}, cfg, rng);
    nn::ParamMap m;
    dec.collect(m);
    std::vector<std::string> names;
    for (auto& [name, t] : m.params) names.push_back(name);
    return names;
}

std::int64_t decoder_param_count(Variant v) {
    DecoderConfig cfg = DecoderConfig::desk();
    cfg.variant = v;
    Rng rng(5);
    PolypDecoder dec({16, 32, 48, 64}, cfg, rng);
    nn::ParamMap m;
    dec.collect(m);
    std::int64_t n = 0;
    for (auto& [name, t] : m.params) {
        std::int64_t k = 1;
        for (auto d : t.shape()) k *= d;
        n += k;
    }
    return n;
}

std::vector<std::string> drop_prefix(const std::vector<std::string>& names,
                                     const std::string& prefix) {
    std::vector<std::string> out;
    for (const auto& n : names)
        if (n.rfind(prefix, 0) != 0) out.push_back(n);
    return out;
}

bool any_prefix(const std::vector<std::string>& names, const std::string& prefix) {
    for (const auto& n : names)
        if (n.rfind(prefix, 0) == 0) return true;
    return false;
}

// Criterion 6: all six variants build and train one smoke epoch; parameter
// name sets differ from the full wiring exactly by the module each variant
// removes or swaps; SAM head sizes order nogcn < conv <= gcn.
Outcome ablation_fidelity(const fs::path& scratch, const DatasetManifest& man) {
    std::vector<std::string> full = decoder_names(Variant::full);
    if (!any_prefix(full, "cfm.") || !any_prefix(full, "cim.") || !any_prefix(full, "sam.gcn."))
        return {false, "full wiring is missing cfm/cim/sam.gcn parameters"};

    if (decoder_names(Variant::no_cfm) != drop_prefix(full, "cfm."))
        return {false, "no_cfm name set is not full minus cfm.*"};
    if (decoder_names(Variant::no_cim) != drop_prefix(full, "cim."))
        return {false, "no_cim name set is not full minus cim.*"};

    std::vector<std::string> no_sam = decoder_names(Variant::no_sam);
    std::vector<std::string> want_no_sam;
    for (const auto& n : full)
        if (n.rfind("sam.", 0) != 0 || n.rfind("sam.wg.", 0) == 0) want_no_sam.push_back(n);
    if (no_sam != want_no_sam) return {false, "no_sam should keep only sam.wg of the sam names"};

    if (decoder_names(Variant::sam_nogcn) != drop_prefix(full, "sam.gcn."))
        return {false, "sam_nogcn name set is not full minus sam.gcn.*"};

    std::vector<std::string> conv = decoder_names(Variant::sam_conv);
    if (!any_prefix(conv, "sam.mix.")) return {false, "sam_conv has no sam.mix parameters"};
    if (drop_prefix(conv, "sam.mix.") != drop_prefix(full, "sam.gcn."))
        return {false, "sam_conv should equal full with gcn swapped for mix"};

    std::int64_t p_nogcn = decoder_param_count(Variant::sam_nogcn);
    std::int64_t p_conv = decoder_param_count(Variant::sam_conv);
    std::int64_t p_gcn = decoder_param_count(Variant::full);
    if (!(p_nogcn < p_conv && p_conv <= p_gcn)) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "param order broken: nogcn %lld, conv %lld, gcn %lld",
                      (long long)p_nogcn, (long long)p_conv, (long long)p_gcn);
        return {false, buf};
    }

    std::vector<Variant> all = {Variant::full,     Variant::no_cfm,    Variant::no_cim,
                                Variant::no_sam,   Variant::sam_nogcn, Variant::sam_conv};
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch = 8;
    cfg.image_size = 64;
    cfg.seed = 3;
    AblationTable table = ablate(ModelConfig::desk(), all, man, cfg, (scratch / "ablate").string());
    if (table.columns.size() != 6)
        return {false, "ablate trained " + std::to_string(table.columns.size()) + " variants"};
    for (const auto& row : table.cells)
        for (const auto& cell : row)
            if (!std::isfinite(cell.mdic) || !std::isfinite(cell.miou))
                return {false, "smoke epoch produced non-finite scores"};

    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "6 variants smoke-trained; name sets differ as documented; nogcn %lld < conv %lld <= gcn %lld",
                  (long long)p_nogcn, (long long)p_conv, (long long)p_gcn);
    return {true, buf};
}

// Criterion 7: rotation protocol moves the scores at 15 degrees and is a
// bit-exact no-op at 0.
Outcome rotation_protocol(const std::string& ckpt, const DatasetManifest& man) {
    auto [plain15, rot15] = rotate_eval_run(ckpt, man, 15.0);
    double delta = std::fabs(plain15.mean.mdic - rot15.mean.mdic);
    if (!(delta > 0.0)) return {false, "15 degrees left mDic unchanged"};
    auto [plain0, rot0] = rotate_eval_run(ckpt, man, 0.0);
    const ScoreVector &a = plain0.mean, &b = rot0.mean;
    bool same = a.mdic == b.mdic && a.miou == b.miou && a.wfm == b.wfm && a.sm == b.sm &&
                a.mem == b.mem && a.maxem == b.maxem && a.mae == b.mae;
    if (!same) return {false, "0 degrees is not a no-op"};
    char buf[120];
    std::snprintf(buf, sizeof(buf), "15 deg shifts mDic by %.4f; 0 deg identical", delta);
    return {true, buf};
}

// Criterion 8: the conditional real-data target is documented (not gated).
Outcome conditional_documented(const fs::path& repo_root) {
    std::ifstream in(repo_root / "README.md");
    if (!in) return {false, "README.md not found"};
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    bool ok = text.find("ColonDB") != std::string::npos &&
              text.find("0.808") != std::string::npos && text.find("0.03") != std::string::npos;
    if (!ok) return {false, "README does not document the ColonDB 0.808 +/- 0.03 target"};
    return {true, "ColonDB mDic 0.808 +/- 0.03 documented as data-conditional, not CI-gated"};
}

}  // namespace

int main(int, char** argv) {
    fs::path exe_dir = fs::absolute(fs::path(argv[0])).parent_path();
    fs::path repo_root = exe_dir.parent_path();
    fs::path scratch = fs::temp_directory_path() / "polypseg_acceptance";
    std::error_code ec;
    fs::remove_all(scratch, ec);
    fs::create_directories(scratch);

    int failures = 0;
    auto report = [&](int idx, const std::string& title, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::printf("criterion %d (%s): %s  %s\n", idx, title.c_str(), o.pass ? "PASS" : "FAIL",
                    o.detail.c_str());
        std::fflush(stdout);
    };

    std::string ckpt;
    DatasetManifest man;

    report(1, "shape suite", shape_suite);
    report(2, "decoder and loss oracles", [&] {
        Outcome dec = run_binary(exe_dir / "test_decoder");
        if (!dec.pass) return dec;
        Outcome los = run_binary(exe_dir / "test_losses");
        if (!los.pass) return los;
        return Outcome{true, "test_decoder and test_losses green (1e-5 / 1e-7 oracles)"};
    });
    report(3, "gradient suite", gradient_suite);
    report(4, "metric suite", [&] {
        Outcome inlined = perfect_score_check();
        if (!inlined.pass) return inlined;
        Outcome met = run_binary(exe_dir / "test_metrics");
        if (!met.pass) return met;
        return Outcome{true, inlined.detail + "; sweep and transcription oracles green"};
    });
    report(5, "overfit test", [&] { return overfit_test(scratch, ckpt, man); });
    report(6, "ablation fidelity", [&] {
        if (man.pairs.empty()) return Outcome{false, "no synthetic set (criterion 5 crashed)"};
        return ablation_fidelity(scratch, man);
    });
    report(7, "rotation protocol", [&] {
        if (ckpt.empty()) return Outcome{false, "no checkpoint (criterion 5 crashed)"};
        return rotation_protocol(ckpt, man);
    });
    report(8, "conditional real-data target", [&] { return conditional_documented(repo_root); });

    std::printf("acceptance: %d/8 criteria passed\n", 8 - failures);
    return failures;
}
