#include "polypseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <set>

#include "json.hpp"
#include "polypseg/common.hpp"
#include "polypseg/ops.hpp"
#include "polypseg/rng.hpp"

namespace fs = std::filesystem;

namespace polypseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool known_ext(std::string ext) {
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

// stem -> path for every recognized image file in a directory
std::map<std::string, std::string> scan_dir(const fs::path& dir, const std::string& what,
                                            std::vector<std::string>& dup) {
    check<IoError>(fs::is_directory(dir), what + " directory missing: " + dir.string());
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || !known_ext(entry.path().extension().string())) continue;
        std::string stem = entry.path().stem().string();
        if (!out.emplace(stem, entry.path().string()).second) dup.push_back(stem);
    }
    return out;
}

std::string join_stems(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size() && i < 8; ++i) {
        if (i) s += ", ";
        s += v[i];
    }
    if (v.size() > 8) s += ", ...";
    return s;
}

// planar RGB in [0,1]
bool load_color(const std::string& path, std::int64_t& h, std::int64_t& w,
                std::vector<double>& out) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    if (img.empty()) return false;
    h = img.rows;
    w = img.cols;
    out.resize(static_cast<std::size_t>(3 * h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            const auto& px = img.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x));
            for (int c = 0; c < 3; ++c)  // BGR file order to RGB planes
                out[static_cast<std::size_t>(c * h * w + y * w + x)] =
                    static_cast<double>(px[2 - c]) / 255.0;
        }
    return true;
}

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
                static_cast<double>(img.at<std::uint8_t>(static_cast<int>(y),
                                                         static_cast<int>(x))) /
                255.0;
    return true;
}

std::vector<double> nearest_resize(const std::vector<double>& src, std::int64_t h,
                                   std::int64_t w, std::int64_t oh, std::int64_t ow) {
    std::vector<double> out(static_cast<std::size_t>(oh * ow));
    for (std::int64_t y = 0; y < oh; ++y) {
        std::int64_t sy = std::min<std::int64_t>(
            h - 1, static_cast<std::int64_t>((static_cast<double>(y) + 0.5) *
                                             static_cast<double>(h) / static_cast<double>(oh)));
        for (std::int64_t x = 0; x < ow; ++x) {
            std::int64_t sx = std::min<std::int64_t>(
                w - 1,
                static_cast<std::int64_t>((static_cast<double>(x) + 0.5) * static_cast<double>(w) /
                                          static_cast<double>(ow)));
            out[static_cast<std::size_t>(y * ow + x)] = src[static_cast<std::size_t>(sy * w + sx)];
        }
    }
    return out;
}

}  // namespace

void DataConfig::validate() const {
    check<ConfigError>(base_size > 0 && base_size % 32 == 0,
                       "base_size must be a positive multiple of 32");
    for (double s : stdev) check<ConfigError>(s > 0.0, "channel stdev must be positive");
}

DatasetManifest load_manifest(const std::string& root, const std::string& name) {
    DatasetManifest m;
    m.name = name;
    fs::path base = fs::path(root) / name;
    m.image_dir = (base / "images").string();
    m.mask_dir = (base / "masks").string();
    std::vector<std::string> dup;
    auto images = scan_dir(m.image_dir, "image", dup);
    auto masks = scan_dir(m.mask_dir, "mask", dup);
    check<IoError>(dup.empty(), "duplicate stems in dataset " + name + ": " + join_stems(dup));
    std::vector<std::string> unmatched;
    for (const auto& [stem, path] : images)
        if (!masks.count(stem)) unmatched.push_back(stem + " (no mask)");
    for (const auto& [stem, path] : masks)
        if (!images.count(stem)) unmatched.push_back(stem + " (no image)");
    check<IoError>(unmatched.empty(),
                   "unmatched files in dataset " + name + ": " + join_stems(unmatched));
    for (const auto& [stem, path] : images) m.pairs.push_back({stem, path, masks[stem]});
    if (m.pairs.empty()) m.warnings.push_back("dataset " + name + " is empty");
    return m;
}

std::string manifest_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["name"] = m.name;
    j["image_dir"] = m.image_dir;
    j["mask_dir"] = m.mask_dir;
    j["split"] = m.split;
    j["warnings"] = m.warnings;
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : m.pairs)
        j["pairs"].push_back({{"stem", p.stem}, {"image", p.image}, {"mask", p.mask}});
    return j.dump();
}

DatasetManifest manifest_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    check<IoError>(!j.is_discarded(), "manifest JSON does not parse");
    DatasetManifest m;
    m.name = j.value("name", "");
    m.image_dir = j.value("image_dir", "");
    m.mask_dir = j.value("mask_dir", "");
    m.split = j.value("split", "train");
    if (j.contains("warnings"))
        for (const auto& w : j["warnings"]) m.warnings.push_back(w.get<std::string>());
    if (j.contains("pairs"))
        for (const auto& p : j["pairs"])
            m.pairs.push_back({p.value("stem", ""), p.value("image", ""), p.value("mask", "")});
    return m;
}

std::int64_t scaled_size(std::int64_t base, double scale) {
    check<ConfigError>(base > 0 && scale > 0.0, "size scaling needs positive inputs");
    std::int64_t snapped =
        std::llround(static_cast<double>(base) * scale / 32.0) * 32;
    return std::max<std::int64_t>(32, snapped);
}

Sample make_sample(const PairPath& pair, bool train, double scale, const DataConfig& cfg) {
    cfg.validate();
    if (train) {
        check<ConfigError>(scale == 0.75 || scale == 1.0 || scale == 1.25,
                           "train scale must be one of 0.75, 1, 1.25");
    } else {
        check<ConfigError>(scale == 1.0, "test mode takes scale 1 only");
    }
    NoGradGuard ng;
    std::int64_t ih = 0, iw = 0, mh = 0, mw = 0;
    std::vector<double> img, msk;
    check<IoError>(load_color(pair.image, ih, iw, img), "cannot read image " + pair.image);
    check<IoError>(load_gray(pair.mask, mh, mw, msk), "cannot read mask " + pair.mask);
    std::int64_t s = train ? scaled_size(cfg.base_size, scale) : cfg.base_size;

    Tensor image = Tensor::from_data({1, 3, ih, iw}, std::move(img));
    if (ih != s || iw != s) image = ops::bilinear_resize(image, s, s);
    std::vector<double> norm = image.values();
    for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < s * s; ++i) {
            std::size_t k = static_cast<std::size_t>(c * s * s + i);
            norm[k] = (norm[k] - cfg.mean[static_cast<std::size_t>(c)]) /
                      cfg.stdev[static_cast<std::size_t>(c)];
        }

    double mx = *std::max_element(msk.begin(), msk.end());
    for (double& v : msk) v = v > 0.5 * mx ? 1.0 : 0.0;
    if (mh != s || mw != s) msk = nearest_resize(msk, mh, mw, s, s);

    Sample out;
    out.image = Tensor::from_data({1, 3, s, s}, std::move(norm));
    out.mask = Tensor::from_data({1, 1, s, s}, std::move(msk));
    out.meta = {ih, iw, pair.image, pair.stem};
    return out;
}

Tensor load_mask_native(const std::string& path) {
    std::int64_t h = 0, w = 0;
    std::vector<double> msk;
    check<IoError>(load_gray(path, h, w, msk), "cannot read mask " + path);
    double mx = *std::max_element(msk.begin(), msk.end());
    for (double& v : msk) v = v > 0.5 * mx ? 1.0 : 0.0;
    return Tensor::from_data({h, w}, std::move(msk));
}

Sample rotate_eval(const Sample& s, double degrees) {
    check<ShapeError>(s.image.defined() && s.mask.defined(), "rotate_eval needs a full sample");
    const Shape& is = s.image.shape();
    const Shape& ms = s.mask.shape();
    check<ShapeError>(is.size() == 4 && ms.size() == 4, "rotate_eval expects NCHW tensors");
    check<ShapeError>(is[2] == ms[2] && is[3] == ms[3], "image and mask sizes disagree");
    std::int64_t ch = is[1], h = is[2], w = is[3];
    double rad = degrees * kPi / 180.0;
    double co = std::cos(rad), si = std::sin(rad);
    double cy = static_cast<double>(h - 1) / 2.0, cx = static_cast<double>(w - 1) / 2.0;
    const auto& iv = s.image.values();
    const auto& mv = s.mask.values();
    std::vector<double> oi(iv.size(), 0.0), om(mv.size(), 0.0);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            double sx = cx + co * dx - si * dy;  // inverse rotation
            double sy = cy + si * dx + co * dy;
            // image: bilinear with zero outside
            std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
            std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
            double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
            for (std::int64_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (int ky = 0; ky < 2; ++ky)
                    for (int kx = 0; kx < 2; ++kx) {
                        std::int64_t yy = y0 + ky, xx = x0 + kx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        double wgt = (ky ? fy : 1.0 - fy) * (kx ? fx : 1.0 - fx);
                        acc += wgt * iv[static_cast<std::size_t>((c * h + yy) * w + xx)];
                    }
                oi[static_cast<std::size_t>((c * h + y) * w + x)] = acc;
            }
            // mask: nearest with zero outside, re-binarized
            std::int64_t xn = std::llround(sx), yn = std::llround(sy);
            double mval = 0.0;
            if (xn >= 0 && xn < w && yn >= 0 && yn < h)
                mval = mv[static_cast<std::size_t>(yn * w + xn)];
            om[static_cast<std::size_t>(y * w + x)] = mval >= 0.5 ? 1.0 : 0.0;
        }
    Sample out;
    out.image = Tensor::from_data(is, std::move(oi));
    out.mask = Tensor::from_data(ms, std::move(om));
    out.meta = s.meta;
    return out;
}

DatasetManifest synth_dataset(const std::string& root, int n, std::uint64_t seed,
                              std::int64_t size) {
    check<ConfigError>(n >= 0, "synth_dataset needs n >= 0");
    check<ConfigError>(size >= 32, "synth_dataset needs size >= 32");
    fs::path base = fs::path(root) / "synth";
    fs::remove_all(base);
    fs::create_directories(base / "images");
    fs::create_directories(base / "masks");
    Rng rng(seed);
    const std::int64_t s = size;
    for (int idx = 0; idx < n; ++idx) {
        // low-frequency value-noise background per channel
        const int g = 5;
        std::vector<double> grid(3 * g * g);
        for (double& v : grid) v = rng.uniform(0.25, 0.75);
        auto bg_at = [&](int c, std::int64_t y, std::int64_t x) {
            double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(s) * (g - 1);
            double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(s) * (g - 1);
            int y0 = std::min(g - 2, static_cast<int>(gy));
            int x0 = std::min(g - 2, static_cast<int>(gx));
            double fy = gy - y0, fx = gx - x0;
            auto at = [&](int yy, int xx) { return grid[static_cast<std::size_t>((c * g + yy) * g + xx)]; };
            return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                   fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        };
        // one wobbly ellipse blob, 5 to 40 percent of the area by design
        double frac = rng.uniform(0.08, 0.28);
        double ab = frac * static_cast<double>(s * s) / kPi;
        double q = rng.uniform(0.7, 1.4);
        double ea = std::sqrt(ab * q), eb = std::sqrt(ab / q);
        double phi = rng.uniform(0.0, kPi);
        double wob_amp = 0.1, wob_phase = rng.uniform(0.0, 2.0 * kPi);
        double bx = rng.uniform(0.42, 0.58) * static_cast<double>(s);
        double by = rng.uniform(0.42, 0.58) * static_cast<double>(s);
        double cphi = std::cos(phi), sphi = std::sin(phi);
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(s * s), 0);
        cv::Mat img(static_cast<int>(s), static_cast<int>(s), CV_8UC3);
        double tr = rng.uniform(0.55, 0.75), tg = rng.uniform(0.25, 0.4),
               tb = rng.uniform(0.3, 0.45);
        for (std::int64_t y = 0; y < s; ++y)
            for (std::int64_t x = 0; x < s; ++x) {
                double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
                double u = cphi * dx + sphi * dy, v = -sphi * dx + cphi * dy;
                double rho = std::sqrt((u / ea) * (u / ea) + (v / eb) * (v / eb));
                double theta = std::atan2(v, u);
                bool inside = rho <= 1.0 + wob_amp * std::sin(3.0 * theta + wob_phase);
                double rgb[3];
                for (int c = 0; c < 3; ++c) rgb[c] = bg_at(c, y, x);
                if (inside) {
                    mask[static_cast<std::size_t>(y * s + x)] = 1;
                    double tint[3] = {tr, tg, tb};
                    for (int c = 0; c < 3; ++c) rgb[c] = 0.65 * tint[c] + 0.35 * rgb[c];
                }
                auto& px = img.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x));
                for (int c = 0; c < 3; ++c)
                    px[2 - c] = static_cast<std::uint8_t>(
                        std::clamp(rgb[c] + rng.uniform(-0.02, 0.02), 0.0, 1.0) * 255.0 + 0.5);
            }
        cv::Mat mimg(static_cast<int>(s), static_cast<int>(s), CV_8UC1);
        for (std::int64_t y = 0; y < s; ++y)
            for (std::int64_t x = 0; x < s; ++x)
                mimg.at<std::uint8_t>(static_cast<int>(y), static_cast<int>(x)) =
                    mask[static_cast<std::size_t>(y * s + x)] ? 255 : 0;
        char name[32];
        std::snprintf(name, sizeof(name), "synth_%03d.png", idx);
        check<IoError>(cv::imwrite((base / "images" / name).string(), img),
                       "cannot write synthetic image");
        check<IoError>(cv::imwrite((base / "masks" / name).string(), mimg),
                       "cannot write synthetic mask");
    }
    return load_manifest(root, "synth");
}

}  // namespace polypseg
