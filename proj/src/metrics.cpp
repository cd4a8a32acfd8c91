#include "polypseg/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "json.hpp"
#include "polypseg/common.hpp"
#include "polypseg/ops.hpp"

namespace polypseg {

namespace {

constexpr int kLevels = 256;

void spatial_dims(const Tensor& t, const char* what, std::int64_t& h, std::int64_t& w) {
    check<ShapeError>(t.defined(), std::string(what) + " tensor is undefined");
    const Shape& s = t.shape();
    check<ShapeError>(s.size() >= 2, std::string(what) + " needs at least 2 dims, got " + shape_str(s));
    for (std::size_t i = 0; i + 2 < s.size(); ++i)
        check<ShapeError>(s[i] == 1,
                          std::string(what) + " leading dims must all be 1, got " + shape_str(s));
    h = s[s.size() - 2];
    w = s[s.size() - 1];
    check<ShapeError>(h > 0 && w > 0, std::string(what) + " has an empty spatial extent");
}

// Validated flat view of one prediction/mask pair.
struct PairView {
    std::int64_t h = 0, w = 0;
    std::vector<double> p;
    std::vector<std::uint8_t> g;
    std::int64_t nfg = 0;
};

PairView validate_pair(const Tensor& pred, const Tensor& gt) {
    PairView v;
    std::int64_t gh = 0, gw = 0;
    spatial_dims(pred, "prediction", v.h, v.w);
    spatial_dims(gt, "mask", gh, gw);
    check<ShapeError>(v.h == gh && v.w == gw,
                      "prediction " + shape_str(pred.shape()) + " and mask " +
                          shape_str(gt.shape()) + " disagree on spatial size");
    std::size_t n = static_cast<std::size_t>(v.h * v.w);
    v.p.resize(n);
    v.g.resize(n);
    const auto& pv = pred.values();
    const auto& gv = gt.values();
    for (std::size_t i = 0; i < n; ++i) {
        double x = pv[i];
        check<ValueError>(x >= 0.0 && x <= 1.0, "prediction values must lie in [0,1]");
        v.p[i] = x;
        double m = gv[i];
        check<ValueError>(m == 0.0 || m == 1.0, "mask values must be exactly 0 or 1");
        v.g[i] = m != 0.0;
        v.nfg += v.g[i];
    }
    return v;
}

// Number of sweep levels t_k = (k+1)/256 that a value passes with >=.
int levels_on(double x) {
    int c = static_cast<int>(std::floor(x * kLevels));
    return std::clamp(c, 0, kLevels);
}

// Per-level |pred >= t| and |pred >= t AND gt| counts via a level histogram.
struct LevelCounts {
    std::array<std::int64_t, kLevels> pred_count{};
    std::array<std::int64_t, kLevels> tp_count{};
};

LevelCounts sweep_counts(const PairView& v) {
    std::array<std::int64_t, kLevels + 1> hp{}, ht{};
    for (std::size_t i = 0; i < v.p.size(); ++i) {
        int c = levels_on(v.p[i]);
        ++hp[c];
        if (v.g[i]) ++ht[c];
    }
    LevelCounts lc;
    std::int64_t ap = 0, at = 0;
    for (int k = kLevels - 1; k >= 0; --k) {
        ap += hp[k + 1];
        at += ht[k + 1];
        lc.pred_count[static_cast<std::size_t>(k)] = ap;
        lc.tp_count[static_cast<std::size_t>(k)] = at;
    }
    return lc;
}

std::pair<double, double> dice_iou_from_counts(const LevelCounts& lc, std::int64_t nfg) {
    double dice = 0.0, iou = 0.0;
    for (int k = 0; k < kLevels; ++k) {
        std::int64_t p = lc.pred_count[static_cast<std::size_t>(k)];
        std::int64_t tp = lc.tp_count[static_cast<std::size_t>(k)];
        std::int64_t denom = p + nfg;
        std::int64_t uni = denom - tp;
        dice += denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
        iou += uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
    }
    return {dice / kLevels, iou / kLevels};
}

// Exact squared-euclidean distance transform restricted to what the weighted
// F-measure needs: for every pixel, the distance to the nearest mask pixel
// and the average of |pred-gt| over all equidistant nearest mask pixels.
// Averaging over ties keeps the redistribution symmetric under flips.
struct EdtOut {
    std::vector<double> dist;  // euclidean distance to the mask
    std::vector<double> et;    // tie-averaged error at the nearest mask pixels
};

constexpr std::int64_t kFar = std::int64_t(1) << 20;

EdtOut edt_redistribute(const PairView& v, const std::vector<double>& err) {
    std::int64_t h = v.h, w = v.w;
    std::size_t n = static_cast<std::size_t>(h * w);
    // Column pass: distance to the nearest mask pixel at or above / below.
    std::vector<std::int64_t> up(n, kFar), dn(n, kFar);
    for (std::int64_t x = 0; x < w; ++x) {
        std::int64_t last = -kFar;
        for (std::int64_t y = 0; y < h; ++y) {
            std::size_t i = static_cast<std::size_t>(y * w + x);
            if (v.g[i]) last = y;
            up[i] = y - last;
        }
        last = kFar * 2;
        for (std::int64_t y = h - 1; y >= 0; --y) {
            std::size_t i = static_cast<std::size_t>(y * w + x);
            if (v.g[i]) last = y;
            dn[i] = last - y;
        }
    }
    EdtOut out;
    out.dist.resize(n);
    out.et.resize(n);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            std::size_t i = static_cast<std::size_t>(y * w + x);
            std::int64_t best = kFar * kFar;
            double esum = 0.0;
            std::int64_t cnt = 0;
            auto consider = [&](std::int64_t dx2, std::int64_t dy, std::int64_t ysrc,
                                std::int64_t xsrc) {
                if (dy >= kFar) return;
                std::int64_t d2 = dx2 + dy * dy;
                if (d2 > best) return;
                double e = err[static_cast<std::size_t>(ysrc * w + xsrc)];
                if (d2 < best) {
                    best = d2;
                    esum = e;
                    cnt = 1;
                } else {
                    esum += e;
                    ++cnt;
                }
            };
            for (std::int64_t d = 0; d < w && d * d <= best; ++d) {
                const std::int64_t cols[2] = {x - d, x + d};
                const int ncols = d == 0 ? 1 : 2;  // x-0 and x+0 are the same column
                for (int ci = 0; ci < ncols; ++ci) {
                    std::int64_t x2 = cols[ci];
                    if (x2 < 0 || x2 >= w) continue;
                    std::size_t j = static_cast<std::size_t>(y * w + x2);
                    consider(d * d, up[j], y - up[j], x2);
                    if (dn[j] != 0 || up[j] != 0) consider(d * d, dn[j], y + dn[j], x2);
                }
            }
            out.dist[i] = std::sqrt(static_cast<double>(best));
            out.et[i] = esum / static_cast<double>(cnt);
        }
    }
    return out;
}

// 7x7 sigma-5 Gaussian smoothing, renormalized per pixel over the in-bounds
// part of the window so a constant field stays exactly constant at borders.
std::vector<double> gauss7(const std::vector<double>& src, std::int64_t h, std::int64_t w) {
    double k[7][7];
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
            double dy = i - 3, dx = j - 3;
            k[i][j] = std::exp(-(dy * dy + dx * dx) / 50.0);
        }
    std::vector<double> out(src.size(), 0.0);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0.0, mass = 0.0;
            for (int i = 0; i < 7; ++i) {
                std::int64_t sy = y + i - 3;
                if (sy < 0 || sy >= h) continue;
                for (int j = 0; j < 7; ++j) {
                    std::int64_t sx = x + j - 3;
                    if (sx < 0 || sx >= w) continue;
                    acc += k[i][j] * src[static_cast<std::size_t>(sy * w + sx)];
                    mass += k[i][j];
                }
            }
            out[static_cast<std::size_t>(y * w + x)] = acc / mass;
        }
    return out;
}

double wfm_impl(const PairView& v) {
    std::size_t n = v.p.size();
    if (v.nfg == 0) {
        for (double x : v.p)
            if (x != 0.0) return 0.0;
        return 1.0;
    }
    std::vector<double> err(n);
    for (std::size_t i = 0; i < n; ++i) err[i] = std::abs(v.p[i] - (v.g[i] ? 1.0 : 0.0));
    EdtOut edt = edt_redistribute(v, err);
    std::vector<double> et(n);
    for (std::size_t i = 0; i < n; ++i) et[i] = v.g[i] ? err[i] : edt.et[i];
    std::vector<double> ea = gauss7(et, v.h, v.w);
    constexpr double kDecay = -0.13862943611198906;  // log(0.5)/5
    double fg_err = 0.0, bg_err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (v.g[i]) {
            fg_err += std::min(err[i], ea[i]);
        } else {
            double b = 2.0 - std::exp(kDecay * edt.dist[i]);
            bg_err += err[i] * b;
        }
    }
    double nfg = static_cast<double>(v.nfg);
    double tpw = std::max(0.0, nfg - fg_err);
    double r = 1.0 - fg_err / nfg;
    double p = tpw + bg_err > 0.0 ? tpw / (tpw + bg_err) : 0.0;
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

double object_score(const std::vector<double>& vals) {
    std::size_t n = vals.size();
    if (n == 0) return 0.0;
    double mu = 0.0;
    for (double x : vals) mu += x;
    mu /= static_cast<double>(n);
    double sigma = 0.0;
    if (n > 1) {
        double acc = 0.0;
        for (double x : vals) acc += (x - mu) * (x - mu);
        sigma = std::sqrt(acc / static_cast<double>(n - 1));
    }
    return 2.0 * mu / (mu * mu + 1.0 + sigma);
}

double s_object(const PairView& v) {
    std::vector<double> fg, bg;
    fg.reserve(static_cast<std::size_t>(v.nfg));
    bg.reserve(v.p.size() - static_cast<std::size_t>(v.nfg));
    for (std::size_t i = 0; i < v.p.size(); ++i) {
        if (v.g[i])
            fg.push_back(v.p[i]);
        else
            bg.push_back(1.0 - v.p[i]);
    }
    // integer-count weighting keeps u*O_fg + (1-u)*O_bg exact when both are 1
    double nfg = static_cast<double>(v.nfg);
    double nbg = static_cast<double>(v.p.size()) - nfg;
    return (nfg * object_score(fg) + nbg * object_score(bg)) / static_cast<double>(v.p.size());
}

double region_ssim(const PairView& v, std::int64_t y0, std::int64_t y1, std::int64_t x0,
                   std::int64_t x1) {
    std::int64_t cnt = (y1 - y0) * (x1 - x0);
    if (cnt <= 0) return 1.0;
    double mx = 0.0, my = 0.0;
    for (std::int64_t y = y0; y < y1; ++y)
        for (std::int64_t x = x0; x < x1; ++x) {
            std::size_t i = static_cast<std::size_t>(y * v.w + x);
            mx += v.p[i];
            my += v.g[i];
        }
    double nd = static_cast<double>(cnt);
    mx /= nd;
    my /= nd;
    double sx = 0.0, sy = 0.0, sxy = 0.0;
    if (cnt > 1) {
        for (std::int64_t y = y0; y < y1; ++y)
            for (std::int64_t x = x0; x < x1; ++x) {
                std::size_t i = static_cast<std::size_t>(y * v.w + x);
                double dx = v.p[i] - mx;
                double dy = (v.g[i] ? 1.0 : 0.0) - my;
                sx += dx * dx;
                sy += dy * dy;
                sxy += dx * dy;
            }
        sx /= nd - 1.0;
        sy /= nd - 1.0;
        sxy /= nd - 1.0;
    }
    double alpha = 4.0 * mx * my * sxy;
    double beta = (mx * mx + my * my) * (sx + sy);
    if (alpha != 0.0) return alpha / beta;
    return beta == 0.0 ? 1.0 : 0.0;
}

double s_region(const PairView& v) {
    double t = static_cast<double>(v.nfg);
    double cx = 0.0, cy = 0.0;
    for (std::int64_t y = 0; y < v.h; ++y)
        for (std::int64_t x = 0; x < v.w; ++x)
            if (v.g[static_cast<std::size_t>(y * v.w + x)]) {
                cx += static_cast<double>(x) + 0.5;
                cy += static_cast<double>(y) + 0.5;
            }
    // split at the rounded mask centroid, pixel centers at index + 0.5
    std::int64_t sx = std::clamp<std::int64_t>(std::llround(cx / t), 1, v.w - 1);
    std::int64_t sy = std::clamp<std::int64_t>(std::llround(cy / t), 1, v.h - 1);
    // quadrant weights are rectangle areas over total area; integer numerators
    // keep the weighted sum exact when every quadrant scores 1
    double a1 = static_cast<double>(sx * sy);
    double a2 = static_cast<double>((v.w - sx) * sy);
    double a3 = static_cast<double>(sx * (v.h - sy));
    double a4 = static_cast<double>((v.w - sx) * (v.h - sy));
    return (a1 * region_ssim(v, 0, sy, 0, sx) + a2 * region_ssim(v, 0, sy, sx, v.w) +
            a3 * region_ssim(v, sy, v.h, 0, sx) + a4 * region_ssim(v, sy, v.h, sx, v.w)) /
           static_cast<double>(v.h * v.w);
}

double smeasure_impl(const PairView& v) {
    std::int64_t n = v.h * v.w;
    if (v.nfg == 0) {
        double mp = 0.0;
        for (double x : v.p) mp += x;
        return 1.0 - mp / static_cast<double>(n);
    }
    if (v.nfg == n) {
        double mp = 0.0;
        for (double x : v.p) mp += x;
        return mp / static_cast<double>(n);
    }
    double q = 0.5 * s_object(v) + 0.5 * s_region(v);
    return q < 0.0 ? 0.0 : q;
}

// One enhanced-alignment score for a binarized map given the four
// foreground/background agreement counts.
double em_level(std::int64_t n11, std::int64_t n10, std::int64_t n01, std::int64_t n00,
                std::int64_t n) {
    std::int64_t nfm = n11 + n10;
    std::int64_t ngt = n11 + n01;
    double nd = static_cast<double>(n);
    if (ngt == 0) return 1.0 - static_cast<double>(nfm) / nd;  // enhanced = 1 - fm
    if (ngt == n) return static_cast<double>(nfm) / nd;        // enhanced = fm
    double mfm = static_cast<double>(nfm) / nd;
    double mgt = static_cast<double>(ngt) / nd;
    auto enhanced = [&](double fm, double g) {
        double afm = fm - mfm, agt = g - mgt;
        double denom = afm * afm + agt * agt;
        double align = denom == 0.0 ? 1.0 : 2.0 * afm * agt / denom;
        return (align + 1.0) * (align + 1.0) / 4.0;
    };
    double acc = static_cast<double>(n11) * enhanced(1.0, 1.0) +
                 static_cast<double>(n10) * enhanced(1.0, 0.0) +
                 static_cast<double>(n01) * enhanced(0.0, 1.0) +
                 static_cast<double>(n00) * enhanced(0.0, 0.0);
    return acc / nd;
}

std::pair<double, double> emeasure_from_counts(const LevelCounts& lc, std::int64_t nfg,
                                               std::int64_t n) {
    double sum = 0.0, best = 0.0;
    for (int k = 0; k < kLevels; ++k) {
        std::int64_t p = lc.pred_count[static_cast<std::size_t>(k)];
        std::int64_t tp = lc.tp_count[static_cast<std::size_t>(k)];
        double s = em_level(tp, p - tp, nfg - tp, n - p - nfg + tp, n);
        sum += s;
        if (k == 0 || s > best) best = s;
    }
    return {sum / kLevels, best};
}

ScoreVector score_view(const PairView& v) {
    ScoreVector s;
    LevelCounts lc = sweep_counts(v);
    std::tie(s.mdic, s.miou) = dice_iou_from_counts(lc, v.nfg);
    std::tie(s.mem, s.maxem) = emeasure_from_counts(lc, v.nfg, v.h * v.w);
    double acc = 0.0;
    for (std::size_t i = 0; i < v.p.size(); ++i) acc += std::abs(v.p[i] - (v.g[i] ? 1.0 : 0.0));
    s.mae = acc / static_cast<double>(v.p.size());
    s.wfm = wfm_impl(v);
    s.sm = smeasure_impl(v);
    return s;
}

// Grayscale image as doubles in [0,1]; false when the file cannot be read.
bool load_gray(const std::string& path, std::int64_t& h, std::int64_t& w,
               std::vector<double>& out) {
    cv::Mat img = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (img.empty()) return false;
    h = img.rows;
    w = img.cols;
    out.resize(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            out[static_cast<std::size_t>(y * w + x)] =
                static_cast<double>(img.at<std::uint8_t>(static_cast<int>(y), static_cast<int>(x))) /
                255.0;
    return true;
}

}  // namespace

std::pair<double, double> dice_iou_sweep(const Tensor& pred, const Tensor& gt) {
    PairView v = validate_pair(pred, gt);
    return dice_iou_from_counts(sweep_counts(v), v.nfg);
}

double mae_score(const Tensor& pred, const Tensor& gt) {
    PairView v = validate_pair(pred, gt);
    double acc = 0.0;
    for (std::size_t i = 0; i < v.p.size(); ++i) acc += std::abs(v.p[i] - (v.g[i] ? 1.0 : 0.0));
    return acc / static_cast<double>(v.p.size());
}

double weighted_fmeasure(const Tensor& pred, const Tensor& gt) {
    return wfm_impl(validate_pair(pred, gt));
}

double smeasure(const Tensor& pred, const Tensor& gt) {
    return smeasure_impl(validate_pair(pred, gt));
}

std::pair<double, double> emeasure(const Tensor& pred, const Tensor& gt) {
    PairView v = validate_pair(pred, gt);
    return emeasure_from_counts(sweep_counts(v), v.nfg, v.h * v.w);
}

ScoreVector score_pair(const Tensor& pred, const Tensor& gt) {
    return score_view(validate_pair(pred, gt));
}

Tensor normalize_prediction(const Tensor& raw) {
    check<ShapeError>(raw.defined(), "normalize_prediction needs a defined tensor");
    const auto& vals = raw.values();
    check<ValueError>(!vals.empty(), "normalize_prediction needs a non-empty tensor");
    double lo = vals[0], hi = vals[0];
    for (double x : vals) {
        check<ValueError>(std::isfinite(x), "prediction contains a non-finite value");
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    if (lo >= 0.0 && hi <= 1.0) return raw;
    std::vector<double> out(vals.size());
    if (hi == lo) {
        std::fill(out.begin(), out.end(), 0.5);
    } else {
        for (std::size_t i = 0; i < vals.size(); ++i) out[i] = (vals[i] - lo) / (hi - lo);
    }
    return Tensor::from_data(raw.shape(), std::move(out));
}

DatasetScores aggregate_scores(std::vector<ScoreVector> per_image) {
    DatasetScores d;
    d.per_image = std::move(per_image);
    std::size_t n = d.per_image.size();
    if (n == 0) return d;
    for (const auto& s : d.per_image) {
        d.mean.mdic += s.mdic;
        d.mean.miou += s.miou;
        d.mean.wfm += s.wfm;
        d.mean.sm += s.sm;
        d.mean.mem += s.mem;
        d.mean.maxem += s.maxem;
        d.mean.mae += s.mae;
    }
    double nd = static_cast<double>(n);
    d.mean.mdic /= nd;
    d.mean.miou /= nd;
    d.mean.wfm /= nd;
    d.mean.sm /= nd;
    d.mean.mem /= nd;
    d.mean.maxem /= nd;
    d.mean.mae /= nd;
    double var = 0.0;
    for (const auto& s : d.per_image) var += (s.mdic - d.mean.mdic) * (s.mdic - d.mean.mdic);
    d.std_mdic = std::sqrt(var / nd);
    return d;
}

DatasetScores score_dataset(
    const std::vector<std::pair<std::string, std::string>>& pred_gt_files) {
    NoGradGuard ng;
    std::vector<ScoreVector> scores;
    std::vector<std::string> missing;
    for (const auto& [pred_path, gt_path] : pred_gt_files) {
        std::int64_t ph = 0, pw = 0, gh = 0, gw = 0;
        std::vector<double> pv, gv;
        if (!load_gray(pred_path, ph, pw, pv)) {
            missing.push_back(pred_path);
            continue;
        }
        if (!load_gray(gt_path, gh, gw, gv)) {
            missing.push_back(gt_path);
            continue;
        }
        Tensor pred = Tensor::from_data({1, 1, ph, pw}, std::move(pv));
        if (ph != gh || pw != gw) pred = ops::bilinear_resize(pred, gh, gw);
        pred = normalize_prediction(pred);
        double mx = *std::max_element(gv.begin(), gv.end());
        std::vector<double> gb(gv.size());
        for (std::size_t i = 0; i < gv.size(); ++i) gb[i] = gv[i] > 0.5 * mx ? 1.0 : 0.0;
        Tensor gt = Tensor::from_data({1, 1, gh, gw}, std::move(gb));
        scores.push_back(score_pair(pred, gt));
    }
    DatasetScores d = aggregate_scores(std::move(scores));
    d.missing = std::move(missing);
    d.complete = d.missing.empty();
    return d;
}

SweepCurve sweep_curve(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
    std::array<std::int64_t, kLevels> tp{}, fp{};
    std::int64_t nfg = 0;
    for (const auto& [pred, gt] : pairs) {
        PairView v = validate_pair(pred, gt);
        LevelCounts lc = sweep_counts(v);
        nfg += v.nfg;
        for (int k = 0; k < kLevels; ++k) {
            tp[static_cast<std::size_t>(k)] += lc.tp_count[static_cast<std::size_t>(k)];
            fp[static_cast<std::size_t>(k)] += lc.pred_count[static_cast<std::size_t>(k)] -
                                               lc.tp_count[static_cast<std::size_t>(k)];
        }
    }
    SweepCurve c;
    double n = static_cast<double>(pairs.size());
    for (int k = 0; k < kLevels; ++k) {
        c.threshold.push_back(static_cast<double>(k + 1) / kLevels);
        c.tpr.push_back(nfg == 0 ? 1.0
                                 : static_cast<double>(tp[static_cast<std::size_t>(k)]) /
                                       static_cast<double>(nfg));
        c.fp_per_image.push_back(
            n == 0.0 ? 0.0 : static_cast<double>(fp[static_cast<std::size_t>(k)]) / n);
    }
    return c;
}

std::string score_table_header() {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-20s %6s %6s %6s %6s %6s %6s %6s\n", "dataset", "mDic",
                  "mIoU", "wFm", "Sm", "mEm", "maxEm", "MAE");
    return buf;
}

std::string score_table_row(const std::string& name, const ScoreVector& s) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-20s %6.3f %6.3f %6.3f %6.3f %6.3f %6.3f %6.3f\n",
                  name.c_str(), s.mdic, s.miou, s.wfm, s.sm, s.mem, s.maxem, s.mae);
    return buf;
}

std::string dataset_scores_json(const std::string& name, const DatasetScores& s) {
    nlohmann::json j;
    j["dataset"] = name;
    j["images"] = s.per_image.size();
    j["complete"] = s.complete;
    j["missing"] = s.missing;
    j["std_mdic"] = s.std_mdic;
    j["mean"] = {{"mDic", s.mean.mdic}, {"mIoU", s.mean.miou}, {"wFm", s.mean.wfm},
                 {"Sm", s.mean.sm},     {"mEm", s.mean.mem},   {"maxEm", s.mean.maxem},
                 {"MAE", s.mean.mae}};
    return j.dump();
}

}  // namespace polypseg
