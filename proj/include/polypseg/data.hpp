#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "polypseg/tensor.hpp"

namespace polypseg {

// Loading and normalization constants. The channel statistics are the usual
// large-corpus values; they live here so call sites never hard-code them.
struct DataConfig {
    std::int64_t base_size = 352;
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> stdev{0.229, 0.224, 0.225};

    void validate() const;  // ConfigError on nonsense
};

struct PairPath {
    std::string stem;
    std::string image;
    std::string mask;
};

// Directory layout: <root>/<name>/{images,masks}/*.png|jpg|jpeg, image and
// mask matched by filename stem.
struct DatasetManifest {
    std::string name;
    std::string image_dir;
    std::string mask_dir;
    std::string split = "train";
    std::vector<PairPath> pairs;
    std::vector<std::string> warnings;
};

// Scans the layout above. Deterministic stem order. Images without masks,
// masks without images, or duplicate stems raise IoError naming the stems;
// an empty dataset yields an empty manifest with a warning.
DatasetManifest load_manifest(const std::string& root, const std::string& name);

std::string manifest_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

struct SampleMeta {
    std::int64_t orig_h = 0;
    std::int64_t orig_w = 0;
    std::string source;
    std::string stem;
};

// One network-ready pair: image [1,3,S,S] normalized, mask [1,1,S,S] binary.
struct Sample {
    Tensor image;
    Tensor mask;
    SampleMeta meta;
};

// base scaled and snapped to the nearest multiple of 32 (backbone stride).
std::int64_t scaled_size(std::int64_t base, double scale);

// Loads, resizes (bilinear image, nearest mask), binarizes the mask at half
// its max, and normalizes the image. Train mode accepts the three scales
// {0.75, 1, 1.25}; test mode requires scale 1.
Sample make_sample(const PairPath& pair, bool train, double scale,
                   const DataConfig& cfg = DataConfig{});

// Mask at its native resolution, binarized at half its max: [H,W] in {0,1}.
Tensor load_mask_native(const std::string& path);

// Rotates image and mask about the center by `degrees` (counterclockwise),
// bilinear for the image, nearest for the mask, zero padding outside, mask
// re-binarized. 0 degrees is an exact identity.
Sample rotate_eval(const Sample& s, double degrees);

// Writes n blob-on-texture images with exact masks under <root>/synth and
// returns the manifest. Same (seed, size, n) reproduces identical bytes.
// Blobs cover 5 to 40 percent of the image area.
DatasetManifest synth_dataset(const std::string& root, int n, std::uint64_t seed,
                              std::int64_t size = 352);

}  // namespace polypseg
