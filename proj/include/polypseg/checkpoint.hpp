#pragma once

#include <string>
#include <utility>
#include <vector>

#include "polypseg/nn.hpp"

namespace polypseg {

// Result of applying a checkpoint to a parameter map. Nothing is loaded
// silently: every discrepancy lands in one of the lists.
struct LoadReport {
    std::vector<std::string> missing;     // wanted by the model, absent from the file
    std::vector<std::string> unexpected;  // present in the file, unknown to the model
    std::vector<std::string> mismatched;  // present in both, shapes differ

    bool ok() const { return missing.empty() && unexpected.empty() && mismatched.empty(); }
    std::string describe() const;
};

struct CheckpointData {
    std::string meta;  // free-form JSON document
    std::vector<std::pair<std::string, Tensor>> tensors;
};

// Flat binary name->tensor container with a JSON metadata header.
void write_checkpoint(const std::string& path, const std::string& meta,
                      const std::vector<std::pair<std::string, Tensor>>& tensors);
CheckpointData read_checkpoint(const std::string& path);
// Reads only the metadata header (cheap; skips tensor payloads).
std::string read_checkpoint_meta(const std::string& path);

// Copies file tensors into matching target tensors (params and buffers).
LoadReport apply_checkpoint(const CheckpointData& data, nn::ParamMap& target);
// Same, but throws IoError describing every discrepancy unless the report
// is clean. allow_unexpected tolerates extra file keys (partial loads).
void strict_load(const CheckpointData& data, nn::ParamMap& target,
                 bool allow_unexpected = false);

}  // namespace polypseg
