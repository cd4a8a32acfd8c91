#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <vector>
#include "json.hpp"
#include "polypseg/common.hpp"
#include "polypseg/metrics.hpp"
#include "polypseg/rng.hpp"

using namespace polypseg;

namespace {

struct Case {
    std::int64_t h = 0, w = 0;
    std::vector<double> p;  // prediction in [0,1]
    std::vector<double> g;  // binary mask
};

Tensor pred_tensor(const Case& c) { return Tensor::from_data({c.h, c.w}, c.p); }
Tensor mask_tensor(const Case& c) { return Tensor::from_data({c.h, c.w}, c.g); }

Case random_case(std::int64_t h, std::int64_t w, Rng& rng, double fg_p = 0.35) {
    Case c{h, w, {}, {}};
    for (std::int64_t i = 0; i < h * w; ++i) {
        c.p.push_back(rng.uniform());
        c.g.push_back(rng.bernoulli(fg_p) ? 1.0 : 0.0);
    }
    return c;
}

// ---- independent oracles, straight-line transcriptions -------------------

void sweep_oracle(const Case& c, double& mdic, double& miou) {
    mdic = 0.0;
    miou = 0.0;
    for (int k = 0; k < 256; ++k) {
        double t = static_cast<double>(k + 1) / 256.0;
        long tp = 0, np = 0, ng = 0;
        for (std::size_t i = 0; i < c.p.size(); ++i) {
            bool pb = c.p[i] >= t;
            bool gb = c.g[i] == 1.0;
            np += pb;
            ng += gb;
            tp += pb && gb;
        }
        if (np + ng == 0) {
            mdic += 1.0;
            miou += 1.0;
        } else {
            mdic += 2.0 * static_cast<double>(tp) / static_cast<double>(np + ng);
            miou += static_cast<double>(tp) / static_cast<double>(np + ng - tp);
        }
    }
    mdic /= 256.0;
    miou /= 256.0;
}

double mae_oracle(const Case& c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < c.p.size(); ++i) acc += std::abs(c.p[i] - c.g[i]);
    return acc / static_cast<double>(c.p.size());
}

double wfb_oracle(const Case& c) {
    const std::int64_t h = c.h, w = c.w;
    const std::size_t n = c.p.size();
    double gsum = 0.0;
    for (double v : c.g) gsum += v;
    if (gsum == 0.0) {
        for (double v : c.p)
            if (v != 0.0) return 0.0;
        return 1.0;
    }
    std::vector<double> E(n);
    for (std::size_t i = 0; i < n; ++i) E[i] = std::abs(c.p[i] - c.g[i]);
    // nearest mask pixel by full scan, errors averaged over distance ties
    std::vector<double> dst(n), et(n);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            std::int64_t best = -1;
            double esum = 0.0;
            long cnt = 0;
            for (std::int64_t y2 = 0; y2 < h; ++y2)
                for (std::int64_t x2 = 0; x2 < w; ++x2) {
                    if (c.g[static_cast<std::size_t>(y2 * w + x2)] != 1.0) continue;
                    std::int64_t d2 = (y - y2) * (y - y2) + (x - x2) * (x - x2);
                    if (best < 0 || d2 < best) {
                        best = d2;
                        esum = E[static_cast<std::size_t>(y2 * w + x2)];
                        cnt = 1;
                    } else if (d2 == best) {
                        esum += E[static_cast<std::size_t>(y2 * w + x2)];
                        ++cnt;
                    }
                }
            std::size_t i = static_cast<std::size_t>(y * w + x);
            dst[i] = std::sqrt(static_cast<double>(best));
            et[i] = c.g[i] == 1.0 ? E[i] : esum / static_cast<double>(cnt);
        }
    // 7x7 sigma-5 Gaussian, renormalized over the in-bounds window
    std::vector<double> ea(n);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0.0, mass = 0.0;
            for (int dy = -3; dy <= 3; ++dy)
                for (int dx = -3; dx <= 3; ++dx) {
                    std::int64_t y2 = y + dy, x2 = x + dx;
                    if (y2 < 0 || y2 >= h || x2 < 0 || x2 >= w) continue;
                    double kk = std::exp(-(dy * dy + dx * dx) / 50.0);
                    acc += kk * et[static_cast<std::size_t>(y2 * w + x2)];
                    mass += kk;
                }
            ea[static_cast<std::size_t>(y * w + x)] = acc / mass;
        }
    double fg_err = 0.0, bg_err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (c.g[i] == 1.0)
            fg_err += std::min(E[i], ea[i]);
        else
            bg_err += E[i] * (2.0 - std::exp(std::log(0.5) / 5.0 * dst[i]));
    }
    double tpw = std::max(0.0, gsum - fg_err);
    double rr = 1.0 - fg_err / gsum;
    double pp = tpw + bg_err > 0.0 ? tpw / (tpw + bg_err) : 0.0;
    return pp + rr > 0.0 ? 2.0 * pp * rr / (pp + rr) : 0.0;
}

double sm_oracle(const Case& c) {
    const std::int64_t h = c.h, w = c.w;
    const double n = static_cast<double>(h * w);
    double gsum = 0.0, psum = 0.0;
    for (std::size_t i = 0; i < c.p.size(); ++i) {
        gsum += c.g[i];
        psum += c.p[i];
    }
    if (gsum == 0.0) return 1.0 - psum / n;
    if (gsum == n) return psum / n;
    auto object_half = [](const std::vector<double>& vals) {
        if (vals.empty()) return 0.0;
        double mu = 0.0;
        for (double v : vals) mu += v;
        mu /= static_cast<double>(vals.size());
        double sd = 0.0;
        if (vals.size() > 1) {
            for (double v : vals) sd += (v - mu) * (v - mu);
            sd = std::sqrt(sd / static_cast<double>(vals.size() - 1));
        }
        return 2.0 * mu / (mu * mu + 1.0 + sd);
    };
    std::vector<double> fgv, bgv;
    for (std::size_t i = 0; i < c.p.size(); ++i) {
        if (c.g[i] == 1.0)
            fgv.push_back(c.p[i]);
        else
            bgv.push_back(1.0 - c.p[i]);
    }
    double so = (gsum * object_half(fgv) + (n - gsum) * object_half(bgv)) / n;
    double cx = 0.0, cy = 0.0;
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            if (c.g[static_cast<std::size_t>(y * w + x)] == 1.0) {
                cx += static_cast<double>(x) + 0.5;
                cy += static_cast<double>(y) + 0.5;
            }
    std::int64_t sx = std::clamp<std::int64_t>(std::llround(cx / gsum), 1, w - 1);
    std::int64_t sy = std::clamp<std::int64_t>(std::llround(cy / gsum), 1, h - 1);
    auto block = [&](std::int64_t y0, std::int64_t y1, std::int64_t x0, std::int64_t x1) {
        double cnt = static_cast<double>((y1 - y0) * (x1 - x0));
        double mx = 0.0, my = 0.0;
        for (std::int64_t y = y0; y < y1; ++y)
            for (std::int64_t x = x0; x < x1; ++x) {
                mx += c.p[static_cast<std::size_t>(y * w + x)];
                my += c.g[static_cast<std::size_t>(y * w + x)];
            }
        mx /= cnt;
        my /= cnt;
        double vx = 0.0, vy = 0.0, vxy = 0.0;
        if (cnt > 1.0) {
            for (std::int64_t y = y0; y < y1; ++y)
                for (std::int64_t x = x0; x < x1; ++x) {
                    double dx = c.p[static_cast<std::size_t>(y * w + x)] - mx;
                    double dy = c.g[static_cast<std::size_t>(y * w + x)] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    vxy += dx * dy;
                }
            vx /= cnt - 1.0;
            vy /= cnt - 1.0;
            vxy /= cnt - 1.0;
        }
        double alpha = 4.0 * mx * my * vxy;
        double beta = (mx * mx + my * my) * (vx + vy);
        if (alpha != 0.0) return alpha / beta;
        return beta == 0.0 ? 1.0 : 0.0;
    };
    double sr = (static_cast<double>(sx * sy) * block(0, sy, 0, sx) +
                 static_cast<double>((w - sx) * sy) * block(0, sy, sx, w) +
                 static_cast<double>(sx * (h - sy)) * block(sy, h, 0, sx) +
                 static_cast<double>((w - sx) * (h - sy)) * block(sy, h, sx, w)) /
                n;
    double q = 0.5 * so + 0.5 * sr;
    return q < 0.0 ? 0.0 : q;
}

void em_oracle(const Case& c, double& mem, double& maxem) {
    const double n = static_cast<double>(c.p.size());
    double gsum = 0.0;
    for (double v : c.g) gsum += v;
    mem = 0.0;
    maxem = 0.0;
    for (int k = 0; k < 256; ++k) {
        double t = static_cast<double>(k + 1) / 256.0;
        std::vector<double> fm(c.p.size());
        double fsum = 0.0;
        for (std::size_t i = 0; i < c.p.size(); ++i) {
            fm[i] = c.p[i] >= t ? 1.0 : 0.0;
            fsum += fm[i];
        }
        double score;
        if (gsum == 0.0) {
            score = 1.0 - fsum / n;
        } else if (gsum == n) {
            score = fsum / n;
        } else {
            double mfm = fsum / n, mgt = gsum / n;
            double acc = 0.0;
            for (std::size_t i = 0; i < c.p.size(); ++i) {
                double afm = fm[i] - mfm, agt = c.g[i] - mgt;
                double denom = afm * afm + agt * agt;
                double align = denom == 0.0 ? 1.0 : 2.0 * afm * agt / denom;
                acc += (align + 1.0) * (align + 1.0) / 4.0;
            }
            score = acc / n;
        }
        mem += score;
        if (k == 0 || score > maxem) maxem = score;
    }
    mem /= 256.0;
}

ScoreVector oracle_scores(const Case& c) {
    ScoreVector s;
    sweep_oracle(c, s.mdic, s.miou);
    s.mae = mae_oracle(c);
    s.wfm = wfb_oracle(c);
    s.sm = sm_oracle(c);
    em_oracle(c, s.mem, s.maxem);
    return s;
}

void check_ranges(const ScoreVector& s) {
    for (double v : {s.mdic, s.miou, s.wfm, s.sm, s.mem, s.maxem, s.mae}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(s.mem <= s.maxem + 1e-12);
}

}  // namespace

TEST_CASE("score inputs are validated") {
    Tensor good_p = Tensor::from_data({2, 2}, {0.1, 0.9, 0.5, 0.0});
    Tensor good_g = Tensor::from_data({2, 2}, {1.0, 0.0, 1.0, 0.0});
    CHECK_THROWS_AS(score_pair(Tensor::from_data({2, 2}, {0.1, 1.2, 0.5, 0.0}), good_g),
                    ValueError);
    CHECK_THROWS_AS(score_pair(Tensor::from_data({2, 2}, {-0.1, 0.2, 0.5, 0.0}), good_g),
                    ValueError);
    double nan = std::nan("");
    CHECK_THROWS_AS(score_pair(Tensor::from_data({2, 2}, {nan, 0.2, 0.5, 0.0}), good_g),
                    ValueError);
    CHECK_THROWS_AS(score_pair(good_p, Tensor::from_data({2, 2}, {0.5, 0.0, 1.0, 0.0})),
                    ValueError);
    CHECK_THROWS_AS(score_pair(good_p, Tensor::from_data({2, 3}, {1, 0, 1, 0, 1, 0})),
                    ShapeError);
    CHECK_THROWS_AS(score_pair(Tensor::from_data({2, 2, 2}, std::vector<double>(8, 0.5)),
                               Tensor::from_data({2, 2, 2}, std::vector<double>(8, 1.0))),
                    ShapeError);
    // leading singleton dims are accepted and equivalent
    Tensor p4 = Tensor::from_data({1, 1, 2, 2}, {0.1, 0.9, 0.5, 0.0});
    ScoreVector a = score_pair(p4, good_g);
    ScoreVector b = score_pair(good_p, good_g);
    CHECK(a.mdic == b.mdic);
    CHECK(a.wfm == b.wfm);
    CHECK(a.sm == b.sm);
}

TEST_CASE("perfect prediction scores exactly one on every metric") {
    Rng rng(401);
    Case c = random_case(9, 11, rng);
    c.g[0] = 0.0;  // keep the mask proper: not empty, not full
    c.g[1] = 1.0;
    c.p = c.g;
    ScoreVector s = score_pair(pred_tensor(c), mask_tensor(c));
    CHECK(s.mdic == 1.0);
    CHECK(s.miou == 1.0);
    CHECK(s.wfm == 1.0);
    CHECK(s.sm == 1.0);
    CHECK(s.mem == 1.0);
    CHECK(s.maxem == 1.0);
    CHECK(s.mae == 0.0);
}

TEST_CASE("degenerate masks follow the documented conventions") {
    // both maps empty: every level is a perfect both-empty match
    Case c{6, 6, std::vector<double>(36, 0.0), std::vector<double>(36, 0.0)};
    ScoreVector s = score_pair(pred_tensor(c), mask_tensor(c));
    CHECK(s.mdic == 1.0);
    CHECK(s.miou == 1.0);
    CHECK(s.wfm == 1.0);
    CHECK(s.sm == 1.0);
    CHECK(s.mem == 1.0);
    CHECK(s.maxem == 1.0);
    CHECK(s.mae == 0.0);

    // empty mask, non-empty prediction
    Case d = c;
    std::fill(d.p.begin(), d.p.end(), 0.3);
    CHECK(weighted_fmeasure(pred_tensor(d), mask_tensor(d)) == 0.0);
    CHECK(smeasure(pred_tensor(d), mask_tensor(d)) == doctest::Approx(0.7).epsilon(1e-12));

    // full mask: structure measure reduces to the prediction mean
    Case f{4, 4, std::vector<double>(16, 0.25), std::vector<double>(16, 1.0)};
    CHECK(smeasure(pred_tensor(f), mask_tensor(f)) == doctest::Approx(0.25).epsilon(1e-12));

    // identically zero prediction on a non-empty mask
    Rng rng(402);
    Case z = random_case(12, 12, rng);
    z.g[5] = 1.0;
    std::fill(z.p.begin(), z.p.end(), 0.0);
    CHECK(weighted_fmeasure(pred_tensor(z), mask_tensor(z)) == 0.0);
}

TEST_CASE("complement of a binary mask scores zero overlap") {
    Rng rng(403);
    Case c = random_case(10, 10, rng);
    c.g[0] = 1.0;
    c.g[1] = 0.0;
    for (std::size_t i = 0; i < c.p.size(); ++i) c.p[i] = 1.0 - c.g[i];
    ScoreVector s = score_pair(pred_tensor(c), mask_tensor(c));
    CHECK(s.mdic == 0.0);
    CHECK(s.miou == 0.0);
    CHECK(s.mae == 1.0);
    ScoreVector o = oracle_scores(c);
    CHECK(std::abs(s.wfm - o.wfm) < 1e-9);
    CHECK(std::abs(s.sm - o.sm) < 1e-9);
    CHECK(std::abs(s.mem - o.mem) < 1e-9);
    CHECK(std::abs(s.maxem - o.maxem) < 1e-9);
}

TEST_CASE("constant half prediction on a half-on mask is hand enumerable") {
    // 128 of the 256 levels binarize 0.5 to all-ones, the rest to all-zeros
    Case c{2, 2, std::vector<double>(4, 0.5), {1.0, 1.0, 0.0, 0.0}};
    auto [mdic, miou] = dice_iou_sweep(pred_tensor(c), mask_tensor(c));
    CHECK(mdic == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(miou == 0.25);
    auto [mem, maxem] = emeasure(pred_tensor(c), mask_tensor(c));
    CHECK(mem == 0.25);
    CHECK(maxem == 0.25);
}

TEST_CASE("dice iou and mae match the brute-force sweep on random cases") {
    Rng rng(404);
    for (int t = 0; t < 100; ++t) {
        Case c = random_case(16, 16, rng, 0.2 + 0.6 * rng.uniform());
        if (t % 10 == 0) std::fill(c.g.begin(), c.g.end(), 0.0);
        if (t % 10 == 5) std::fill(c.g.begin(), c.g.end(), 1.0);
        if (t % 7 == 0)
            for (double& v : c.p) v = v >= 0.5 ? 1.0 : 0.0;
        auto [mdic, miou] = dice_iou_sweep(pred_tensor(c), mask_tensor(c));
        double od, oi;
        sweep_oracle(c, od, oi);
        CHECK(std::abs(mdic - od) < 1e-9);
        CHECK(std::abs(miou - oi) < 1e-9);
        CHECK(std::abs(mae_score(pred_tensor(c), mask_tensor(c)) - mae_oracle(c)) < 1e-9);
    }
}

TEST_CASE("structure alignment and weighted scores match their transcriptions") {
    Rng rng(405);
    const std::int64_t sizes[][2] = {{8, 8}, {16, 16}, {11, 13}, {5, 9}};
    for (int t = 0; t < 24; ++t) {
        auto [h, w] = sizes[t % 4];
        Case c = random_case(h, w, rng, 0.15 + 0.7 * rng.uniform());
        if (t == 20) std::fill(c.g.begin(), c.g.end(), 0.0);
        if (t == 21) std::fill(c.g.begin(), c.g.end(), 1.0);
        if (t == 22)
            for (double& v : c.p) v = v >= 0.5 ? 1.0 : 0.0;
        ScoreVector s = score_pair(pred_tensor(c), mask_tensor(c));
        ScoreVector o = oracle_scores(c);
        CHECK(std::abs(s.wfm - o.wfm) < 1e-9);
        CHECK(std::abs(s.sm - o.sm) < 1e-9);
        CHECK(std::abs(s.mem - o.mem) < 1e-9);
        CHECK(std::abs(s.maxem - o.maxem) < 1e-9);
        check_ranges(s);
    }
}

TEST_CASE("single blob weighted f-measure is pinned by its transcription") {
    // 3x3 blob centered in a 5x5 frame, prediction shifted one pixel right
    Case c{5, 5, std::vector<double>(25, 0.0), std::vector<double>(25, 0.0)};
    for (std::int64_t y = 1; y <= 3; ++y)
        for (std::int64_t x = 1; x <= 3; ++x) c.g[static_cast<std::size_t>(y * 5 + x)] = 1.0;
    for (std::int64_t y = 1; y <= 3; ++y)
        for (std::int64_t x = 2; x <= 4; ++x) c.p[static_cast<std::size_t>(y * 5 + x)] = 1.0;
    double v = weighted_fmeasure(pred_tensor(c), mask_tensor(c));
    CHECK(std::abs(v - wfb_oracle(c)) < 1e-9);
    CHECK(v > 0.0);
    CHECK(v < 1.0);
}

TEST_CASE("all scores are invariant under a horizontal flip of both maps") {
    Rng rng(406);
    Case c = random_case(12, 10, rng);
    Case f = c;
    for (std::int64_t y = 0; y < c.h; ++y)
        for (std::int64_t x = 0; x < c.w; ++x) {
            f.p[static_cast<std::size_t>(y * c.w + x)] =
                c.p[static_cast<std::size_t>(y * c.w + (c.w - 1 - x))];
            f.g[static_cast<std::size_t>(y * c.w + x)] =
                c.g[static_cast<std::size_t>(y * c.w + (c.w - 1 - x))];
        }
    ScoreVector a = score_pair(pred_tensor(c), mask_tensor(c));
    ScoreVector b = score_pair(pred_tensor(f), mask_tensor(f));
    CHECK(a.mdic == doctest::Approx(b.mdic).epsilon(1e-12));
    CHECK(a.miou == doctest::Approx(b.miou).epsilon(1e-12));
    CHECK(a.wfm == doctest::Approx(b.wfm).epsilon(1e-12));
    CHECK(a.sm == doctest::Approx(b.sm).epsilon(1e-12));
    CHECK(a.mem == doctest::Approx(b.mem).epsilon(1e-12));
    CHECK(a.maxem == doctest::Approx(b.maxem).epsilon(1e-12));
    CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-12));
}

TEST_CASE("blending the prediction toward the mask never lowers mean dice") {
    Rng rng(407);
    for (int t = 0; t < 5; ++t) {
        Case c = random_case(12, 12, rng);
        double prev = -1.0;
        for (double lam : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            Case b = c;
            for (std::size_t i = 0; i < b.p.size(); ++i)
                b.p[i] = std::clamp((1.0 - lam) * c.p[i] + lam * c.g[i], 0.0, 1.0);
            auto [mdic, miou] = dice_iou_sweep(pred_tensor(b), mask_tensor(b));
            (void)miou;
            CHECK(mdic >= prev - 1e-12);
            prev = mdic;
        }
        CHECK(prev == 1.0);  // lambda 1 reaches the mask itself
    }
}

TEST_CASE("mae is symmetric under joint complement") {
    Rng rng(408);
    Case c = random_case(8, 8, rng);
    Case d = c;
    for (std::size_t i = 0; i < c.p.size(); ++i) {
        d.p[i] = 1.0 - c.p[i];
        d.g[i] = 1.0 - c.g[i];
    }
    CHECK(mae_score(pred_tensor(c), mask_tensor(c)) ==
          doctest::Approx(mae_score(pred_tensor(d), mask_tensor(d))).epsilon(1e-12));
}

TEST_CASE("aggregation means per-image scores and reports population std") {
    ScoreVector a{0.8, 0.7, 0.6, 0.5, 0.4, 0.45, 0.1};
    ScoreVector b{0.6, 0.5, 0.4, 0.3, 0.2, 0.25, 0.2};
    ScoreVector c{1.0, 0.9, 0.8, 0.7, 0.6, 0.65, 0.0};
    DatasetScores d = aggregate_scores({a, b, c});
    CHECK(d.per_image.size() == 3);
    CHECK(d.mean.mdic == doctest::Approx((0.8 + 0.6 + 1.0) / 3.0).epsilon(1e-15));
    CHECK(d.mean.mae == doctest::Approx(0.1).epsilon(1e-12));
    double mu = (0.8 + 0.6 + 1.0) / 3.0;
    double var = ((0.8 - mu) * (0.8 - mu) + (0.6 - mu) * (0.6 - mu) + (1.0 - mu) * (1.0 - mu)) / 3.0;
    CHECK(d.std_mdic == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
    CHECK(aggregate_scores({a}).std_mdic == 0.0);
    DatasetScores empty = aggregate_scores({});
    CHECK(empty.per_image.empty());
    CHECK(empty.mean.mdic == 0.0);

    std::string header = score_table_header();
    CHECK(header.find("dataset") == 0);
    CHECK(header.find("maxEm") != std::string::npos);
    std::string row = score_table_row("toy", d.mean);
    CHECK(row.find("toy") == 0);
    CHECK(row.find("0.800") != std::string::npos);

    auto j = nlohmann::json::parse(dataset_scores_json("toy", d));
    CHECK(j["dataset"] == "toy");
    CHECK(j["images"] == 3);
    CHECK(j["complete"] == true);
    CHECK(j["mean"]["mDic"] == doctest::Approx(mu).epsilon(1e-12));
}

TEST_CASE("dataset scoring loads pairs from disk") {
    namespace fs = std::filesystem;
    fs::path dir = fs::path("metrics_io_scratch");
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto write_png = [&](const std::string& name, const std::vector<std::uint8_t>& px,
                         int h, int w) {
        cv::Mat m(h, w, CV_8UC1);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) m.at<std::uint8_t>(y, x) = px[static_cast<std::size_t>(y * w + x)];
        REQUIRE(cv::imwrite((dir / name).string(), m));
    };
    std::vector<std::uint8_t> blob(16 * 16, 0);
    for (int y = 4; y < 10; ++y)
        for (int x = 5; x < 12; ++x) blob[static_cast<std::size_t>(y * 16 + x)] = 255;
    write_png("gt.png", blob, 16, 16);
    write_png("pred_perfect.png", blob, 16, 16);
    std::vector<std::uint8_t> soft(16 * 16, 20);
    for (int y = 3; y < 11; ++y)
        for (int x = 4; x < 12; ++x) soft[static_cast<std::size_t>(y * 16 + x)] = 200;
    write_png("pred_soft.png", soft, 16, 16);
    std::vector<std::uint8_t> small(8 * 8, 0);
    for (int y = 2; y < 5; ++y)
        for (int x = 2; x < 6; ++x) small[static_cast<std::size_t>(y * 8 + x)] = 230;
    write_png("pred_small.png", small, 8, 8);

    std::string gt = (dir / "gt.png").string();
    DatasetScores ident = score_dataset({{(dir / "pred_perfect.png").string(), gt},
                                         {(dir / "pred_perfect.png").string(), gt}});
    CHECK(ident.complete);
    CHECK(ident.per_image.size() == 2);
    CHECK(ident.mean.mdic == 1.0);
    CHECK(ident.mean.wfm == 1.0);
    CHECK(ident.mean.mae == 0.0);
    CHECK(ident.std_mdic == 0.0);

    DatasetScores single = score_dataset({{(dir / "pred_soft.png").string(), gt}});
    CHECK(single.per_image.size() == 1);
    CHECK(single.std_mdic == 0.0);

    // three-pair set: the mean is the arithmetic mean of the per-image scores
    DatasetScores toy = score_dataset({{(dir / "pred_perfect.png").string(), gt},
                                       {(dir / "pred_soft.png").string(), gt},
                                       {(dir / "pred_small.png").string(), gt}});
    CHECK(toy.complete);
    REQUIRE(toy.per_image.size() == 3);
    double expect = (toy.per_image[0].mdic + toy.per_image[1].mdic + toy.per_image[2].mdic) / 3.0;
    CHECK(toy.mean.mdic == doctest::Approx(expect).epsilon(1e-15));
    for (const auto& s : toy.per_image) check_ranges(s);

    // a missing prediction is listed and leaves the rest scored
    DatasetScores part = score_dataset({{(dir / "absent.png").string(), gt},
                                        {(dir / "pred_perfect.png").string(), gt}});
    CHECK_FALSE(part.complete);
    REQUIRE(part.missing.size() == 1);
    CHECK(part.missing[0] == (dir / "absent.png").string());
    CHECK(part.per_image.size() == 1);
    CHECK(part.mean.mdic == 1.0);
    fs::remove_all(dir);
}

TEST_CASE("sweep curve reports tpr one and zero fps for a perfect predictor") {
    Rng rng(409);
    Case c = random_case(10, 10, rng);
    c.g[3] = 1.0;
    c.p = c.g;
    SweepCurve curve = sweep_curve({{pred_tensor(c), mask_tensor(c)},
                                    {pred_tensor(c), mask_tensor(c)}});
    REQUIRE(curve.threshold.size() == 256);
    CHECK(curve.threshold.front() == doctest::Approx(1.0 / 256.0));
    CHECK(curve.threshold.back() == 1.0);
    for (int k = 0; k < 256; ++k) {
        CHECK(curve.tpr[static_cast<std::size_t>(k)] == 1.0);
        CHECK(curve.fp_per_image[static_cast<std::size_t>(k)] == 0.0);
    }
    // inverted predictor: no true positives at any level
    Case inv = c;
    for (std::size_t i = 0; i < inv.p.size(); ++i) inv.p[i] = 1.0 - c.g[i];
    SweepCurve bad = sweep_curve({{pred_tensor(inv), mask_tensor(inv)}});
    for (int k = 0; k < 256; ++k) CHECK(bad.tpr[static_cast<std::size_t>(k)] == 0.0);
    CHECK(bad.fp_per_image[0] > 0.0);
}

TEST_CASE("prediction normalization rescales only out-of-range maps") {
    Tensor in_range = Tensor::from_data({2, 2}, {0.0, 0.25, 0.5, 1.0});
    Tensor same = normalize_prediction(in_range);
    for (int i = 0; i < 4; ++i) CHECK(same.values()[static_cast<std::size_t>(i)] ==
                                      in_range.values()[static_cast<std::size_t>(i)]);
    Tensor logits = Tensor::from_data({2, 2}, {-3.0, 1.0, 5.0, 0.0});
    Tensor norm = normalize_prediction(logits);
    CHECK(norm.values()[0] == 0.0);
    CHECK(norm.values()[2] == 1.0);
    CHECK(norm.values()[1] == doctest::Approx(0.5));
    CHECK(norm.values()[3] == doctest::Approx(3.0 / 8.0));
    Tensor flat = normalize_prediction(Tensor::from_data({1, 3}, {7.0, 7.0, 7.0}));
    for (int i = 0; i < 3; ++i) CHECK(flat.values()[static_cast<std::size_t>(i)] == 0.5);
    CHECK_THROWS_AS(normalize_prediction(Tensor::from_data({1, 2}, {std::nan(""), 0.5})),
                    ValueError);
}
