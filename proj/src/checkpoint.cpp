#include "polypseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace polypseg {

namespace {

constexpr char kMagic[8] = {'P', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    check<IoError>(static_cast<bool>(is), "checkpoint: truncated file");
    return v;
}

void append_list(std::ostringstream& os, const char* label, const std::vector<std::string>& xs) {
    if (xs.empty()) return;
    os << "  " << label << " (" << xs.size() << "):";
    for (const auto& x : xs) os << " " << x;
    os << "\n";
}

}  // namespace

std::string LoadReport::describe() const {
    std::ostringstream os;
    os << "checkpoint load report: missing=" << missing.size()
       << " unexpected=" << unexpected.size() << " mismatched=" << mismatched.size() << "\n";
    append_list(os, "missing", missing);
    append_list(os, "unexpected", unexpected);
    append_list(os, "mismatched", mismatched);
    return os.str();
}

void write_checkpoint(const std::string& path, const std::string& meta,
                      const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    check<IoError>(static_cast<bool>(os), "checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 8);
    write_raw<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    write_raw<std::uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Shape& s = t.shape();
        write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
        for (auto d : s) write_raw<std::int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
    check<IoError>(static_cast<bool>(os), "checkpoint: write failed: " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check<IoError>(static_cast<bool>(is), "checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    check<IoError>(static_cast<bool>(is) && std::memcmp(magic, kMagic, 8) == 0,
                   "checkpoint: bad magic in " + path);
    CheckpointData data;
    auto meta_len = read_raw<std::uint64_t>(is);
    data.meta.resize(meta_len);
    is.read(data.meta.data(), static_cast<std::streamsize>(meta_len));
    check<IoError>(static_cast<bool>(is), "checkpoint: truncated metadata in " + path);
    auto count = read_raw<std::uint64_t>(is);
    data.tensors.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        auto name_len = read_raw<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        auto rank = read_raw<std::uint32_t>(is);
        check<IoError>(rank <= 8, "checkpoint: implausible tensor rank in " + path);
        Shape shape(rank);
        for (auto& d : shape) d = read_raw<std::int64_t>(is);
        std::int64_t n = shape_numel(shape);
        check<IoError>(n >= 0, "checkpoint: negative tensor size in " + path);
        std::vector<double> vals(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(double)));
        check<IoError>(static_cast<bool>(is), "checkpoint: truncated tensor data in " + path);
        data.tensors.emplace_back(std::move(name),
                                  Tensor::from_data(std::move(shape), std::move(vals)));
    }
    return data;
}

std::string read_checkpoint_meta(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check<IoError>(static_cast<bool>(is), "checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    check<IoError>(static_cast<bool>(is) && std::memcmp(magic, kMagic, 8) == 0,
                   "checkpoint: bad magic in " + path);
    auto meta_len = read_raw<std::uint64_t>(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    check<IoError>(static_cast<bool>(is), "checkpoint: truncated metadata in " + path);
    return meta;
}

LoadReport apply_checkpoint(const CheckpointData& data, nn::ParamMap& target) {
    LoadReport report;
    std::unordered_map<std::string, const Tensor*> index;
    for (const auto& [name, t] : data.tensors) index[name] = &t;

    auto targets = target.all();
    std::unordered_map<std::string, bool> used;
    for (auto& [name, t] : targets) {
        auto it = index.find(name);
        if (it == index.end()) {
            report.missing.push_back(name);
            continue;
        }
        used[name] = true;
        if (it->second->shape() != t.shape()) {
            report.mismatched.push_back(name + " file" + shape_str(it->second->shape()) +
                                        " model" + shape_str(t.shape()));
            continue;
        }
        t.values() = it->second->values();
    }
    for (const auto& [name, t] : data.tensors)
        if (!used.count(name)) report.unexpected.push_back(name);
    return report;
}

void strict_load(const CheckpointData& data, nn::ParamMap& target, bool allow_unexpected) {
    LoadReport report = apply_checkpoint(data, target);
    if (allow_unexpected) report.unexpected.clear();
    check<IoError>(report.ok(), report.describe());
}

}  // namespace polypseg
