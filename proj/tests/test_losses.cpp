#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "polypseg/losses.hpp"
#include "testutil.hpp"

using namespace polypseg;
using testutil::fd_gradcheck;
using testutil::max_abs_diff;

namespace {

double bce_term(double x, double t) {
    return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct-formula single-sample oracles over flat value arrays.
double wbce_oracle(const std::vector<double>& x, const std::vector<double>& g,
                   const std::vector<double>& w) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += w[i] * bce_term(x[i], g[i]);
        den += w[i];
    }
    return num / den;
}

double wiou_oracle(const std::vector<double>& x, const std::vector<double>& g,
                   const std::vector<double>& w, double eps) {
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double p = sig(x[i]);
        inter += w[i] * p * g[i];
        uni += w[i] * (p + g[i] - p * g[i]);
    }
    return 1.0 - (inter + eps) / (uni + eps);
}

Tensor random_mask(Shape shape, Rng& rng, double p_on = 0.4) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.values()) v = rng.bernoulli(p_on) ? 1.0 : 0.0;
    return t;
}

}  // namespace

TEST_CASE("config validation") {
    LossConfig c;
    c.validate();
    c.weight_window = 30;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.weight_gain = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.eps = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("pixel weights are exactly one on constant masks") {
    LossConfig cfg;
    Tensor zero = Tensor::zeros({1, 1, 9, 9});
    Tensor w0 = pixel_weights(zero, cfg);
    for (double v : w0.values()) CHECK(v == 1.0);
    Tensor one = Tensor::full({1, 1, 9, 9}, 1.0);
    Tensor w1 = pixel_weights(one, cfg);
    for (double v : w1.values()) CHECK(v == 1.0);
}

TEST_CASE("pixel weights match a hand pooling oracle and stay bounded") {
    LossConfig cfg;
    cfg.weight_window = 3;
    Tensor g = Tensor::zeros({1, 1, 7, 7});
    g.values()[static_cast<std::size_t>(3 * 7 + 3)] = 1.0;  // center pixel
    g.values()[0] = 1.0;                                    // corner pixel
    Tensor w = pixel_weights(g, cfg);
    // 3x3 box average over the in-bounds part of the window
    for (std::int64_t y = 0; y < 7; ++y)
        for (std::int64_t x = 0; x < 7; ++x) {
            double acc = 0.0;
            int valid = 0;
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dx = -1; dx <= 1; ++dx) {
                    std::int64_t sy = y + dy, sx = x + dx;
                    if (sy >= 0 && sy < 7 && sx >= 0 && sx < 7) {
                        acc += g.values()[static_cast<std::size_t>(sy * 7 + sx)];
                        ++valid;
                    }
                }
            double gt = g.values()[static_cast<std::size_t>(y * 7 + x)];
            double want = 1.0 + cfg.weight_gain * std::abs(acc / valid - gt);
            CHECK(w.at({0, 0, y, x}) == doctest::Approx(want).epsilon(1e-12));
        }
    CHECK(w.at({0, 0, 3, 3}) == doctest::Approx(1.0 + 5.0 * (1.0 - 1.0 / 9.0)));
    CHECK(w.at({0, 0, 0, 0}) == doctest::Approx(1.0 + 5.0 * (1.0 - 1.0 / 4.0)));

    Rng rng(1);
    Tensor rmask = random_mask({2, 1, 16, 16}, rng);
    Tensor rw = pixel_weights(rmask, cfg);
    for (double v : rw.values()) {
        CHECK(v >= 1.0);
        CHECK(v <= 1.0 + cfg.weight_gain);
    }

    Tensor bad = Tensor::full({1, 1, 4, 4}, 0.5);
    CHECK_THROWS_AS(pixel_weights(bad, cfg), ValueError);
}

TEST_CASE("weighted bce handles saturation and uniform predictions") {
    Rng rng(2);
    Tensor g = random_mask({1, 1, 8, 8}, rng);
    Tensor w = Tensor::full({1, 1, 8, 8}, 1.0);
    // saturated correct logits
    Tensor good = Tensor::zeros({1, 1, 8, 8});
    for (std::int64_t i = 0; i < 64; ++i)
        good.values()[static_cast<std::size_t>(i)] =
            g.values()[static_cast<std::size_t>(i)] > 0.5 ? 50.0 : -50.0;
    CHECK(weighted_bce(good, g, w).item() < 1e-6);
    // zero logits give ln 2 regardless of mask and weights
    LossConfig cfg;
    cfg.weight_window = 3;
    Tensor wb = pixel_weights(g, cfg);
    Tensor zero = Tensor::zeros({1, 1, 8, 8});
    CHECK(weighted_bce(zero, g, wb).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor nan = Tensor::full({1, 1, 8, 8}, std::nan(""));
    CHECK_THROWS_AS(weighted_bce(nan, g, w), ValueError);
    CHECK_THROWS_AS(weighted_bce(Tensor::zeros({1, 1, 4, 4}), g, w), ShapeError);
}

TEST_CASE("weighted bce matches the direct-formula oracle") {
    Rng rng(3);
    Tensor x = Tensor::randn({1, 1, 4, 4}, rng, 2.0);
    Tensor g = random_mask({1, 1, 4, 4}, rng);
    LossConfig cfg;
    cfg.weight_window = 3;
    Tensor w = pixel_weights(g, cfg);
    double want = wbce_oracle(x.values(), g.values(), w.values());
    CHECK(std::abs(weighted_bce(x, g, w).item() - want) < 1e-7);
}

TEST_CASE("weighted iou conventions") {
    Rng rng(4);
    Tensor g = random_mask({1, 1, 8, 8}, rng);
    Tensor w = Tensor::full({1, 1, 8, 8}, 1.0);
    Tensor good = Tensor::zeros({1, 1, 8, 8});
    for (std::int64_t i = 0; i < 64; ++i)
        good.values()[static_cast<std::size_t>(i)] =
            g.values()[static_cast<std::size_t>(i)] > 0.5 ? 50.0 : -50.0;
    CHECK(weighted_iou(good, g, w, 1.0).item() < 1e-3);
    // empty mask with confident-negative prediction is near-perfect
    Tensor empty = Tensor::zeros({1, 1, 8, 8});
    Tensor veryneg = Tensor::full({1, 1, 8, 8}, -50.0);
    CHECK(weighted_iou(veryneg, empty, w, 1.0).item() < 1e-9);

    Tensor nan = Tensor::full({1, 1, 8, 8}, std::nan(""));
    CHECK_THROWS_AS(weighted_iou(nan, g, w, 1.0), ValueError);
}

TEST_CASE("weighted iou matches the direct-formula oracle") {
    Rng rng(5);
    Tensor x = Tensor::randn({1, 1, 4, 4}, rng, 2.0);
    Tensor g = random_mask({1, 1, 4, 4}, rng);
    LossConfig cfg;
    cfg.weight_window = 3;
    Tensor w = pixel_weights(g, cfg);
    double want = wiou_oracle(x.values(), g.values(), w.values(), cfg.eps);
    CHECK(std::abs(weighted_iou(x, g, w, cfg.eps).item() - want) < 1e-7);
}

TEST_CASE("batched losses average the per-sample values") {
    Rng rng(6);
    Tensor x = Tensor::randn({2, 1, 4, 4}, rng, 1.5);
    Tensor g = random_mask({2, 1, 4, 4}, rng);
    LossConfig cfg;
    cfg.weight_window = 3;
    Tensor w = pixel_weights(g, cfg);
    auto slice = [](const Tensor& t, std::int64_t b) {
        std::vector<double> out(t.values().begin() + b * 16, t.values().begin() + (b + 1) * 16);
        return out;
    };
    double want_bce =
        0.5 * (wbce_oracle(slice(x, 0), slice(g, 0), slice(w, 0)) +
               wbce_oracle(slice(x, 1), slice(g, 1), slice(w, 1)));
    double want_iou =
        0.5 * (wiou_oracle(slice(x, 0), slice(g, 0), slice(w, 0), 1.0) +
               wiou_oracle(slice(x, 1), slice(g, 1), slice(w, 1), 1.0));
    CHECK(std::abs(weighted_bce(x, g, w).item() - want_bce) < 1e-7);
    CHECK(std::abs(weighted_iou(x, g, w, 1.0).item() - want_iou) < 1e-7);
}

TEST_CASE("total loss composes the four terms with dual supervision") {
    Rng rng(7);
    Tensor p1 = Tensor::randn({1, 1, 8, 8}, rng, 1.5);
    Tensor p2 = Tensor::randn({1, 1, 8, 8}, rng, 1.5);
    Tensor g = random_mask({1, 1, 8, 8}, rng);
    LossConfig cfg;
    cfg.weight_window = 3;
    PredictionTriple pred{p1, p2, ops::add(p1, p2)};
    LossReport r;
    Tensor total = total_loss(pred, g, cfg, &r);

    Tensor w = pixel_weights(g, cfg);
    double bm = weighted_bce(p2, g, w).item();
    double im = weighted_iou(p2, g, w, cfg.eps).item();
    double ba = weighted_bce(p1, g, w).item();
    double ia = weighted_iou(p1, g, w, cfg.eps).item();
    CHECK(total.item() == doctest::Approx(bm + im + ba + ia).epsilon(1e-12));
    CHECK(r.wbce_main == bm);
    CHECK(r.wiou_main == im);
    CHECK(r.wbce_aux == ba);
    CHECK(r.wiou_aux == ia);
    CHECK(r.total == r.main + r.aux);
    CHECK(r.main == r.wbce_main + r.wiou_main);
    CHECK(r.aux == r.wbce_aux + r.wiou_aux);
    CHECK(r.total >= 0.0);

    // identical heads make the two supervision terms coincide
    PredictionTriple same{p1, p1, ops::scale(p1, 2.0)};
    LossReport rs;
    total_loss(same, g, cfg, &rs);
    CHECK(rs.main == rs.aux);

    // perfect saturated predictions drive the total near zero
    Tensor good = Tensor::zeros({1, 1, 8, 8});
    for (std::int64_t i = 0; i < 64; ++i)
        good.values()[static_cast<std::size_t>(i)] =
            g.values()[static_cast<std::size_t>(i)] > 0.5 ? 50.0 : -50.0;
    LossReport rp;
    total_loss({good, good, ops::scale(good, 2.0)}, g, cfg, &rp);
    CHECK(rp.total < 1e-3);

    // no silent resizing
    PredictionTriple badshape{Tensor::zeros({1, 1, 4, 4}), p2, p2};
    CHECK_THROWS_AS(total_loss(badshape, g, cfg, nullptr), ShapeError);
}

TEST_CASE("scaling correct-sign logits never increases either term") {
    Rng rng(8);
    Tensor g = random_mask({1, 1, 6, 6}, rng);
    LossConfig cfg;
    cfg.weight_window = 3;
    Tensor w = pixel_weights(g, cfg);
    std::vector<double> mag(36);
    for (auto& v : mag) v = 0.2 + rng.uniform() * 2.0;
    double prev_bce = 1e30, prev_iou = 1e30;
    for (double s : {0.5, 1.0, 2.0, 4.0}) {
        Tensor x = Tensor::zeros({1, 1, 6, 6});
        for (std::size_t i = 0; i < 36; ++i)
            x.values()[i] = s * (2.0 * g.values()[i] - 1.0) * mag[i];
        double b = weighted_bce(x, g, w).item();
        double u = weighted_iou(x, g, w, cfg.eps).item();
        CHECK(b <= prev_bce);
        CHECK(u <= prev_iou);
        CHECK(b >= 0.0);
        CHECK(u >= 0.0);
        prev_bce = b;
        prev_iou = u;
    }
}

TEST_CASE("finite differences agree with analytic gradients") {
    Rng rng(9);
    Tensor p1 = Tensor::randn({1, 1, 8, 8}, rng, 1.0, true);
    Tensor p2 = Tensor::randn({1, 1, 8, 8}, rng, 1.0, true);
    Tensor g = random_mask({1, 1, 8, 8}, rng);
    LossConfig cfg;
    cfg.weight_window = 3;
    auto fn = [&] { return total_loss({p1, p2, ops::add(p1, p2)}, g, cfg, nullptr); };
    CHECK(fd_gradcheck(fn, {p1, p2}, 1e-4) < 1e-3);
}
