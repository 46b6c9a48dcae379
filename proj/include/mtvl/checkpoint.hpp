#pragma once

// Flat checkpoint container: JSON manifest + raw little-endian scalars.
// Round-trips are bit-exact.

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mtvl/nn.hpp"

namespace mtvl {

inline constexpr char kCkptMagic[8] = {'M', 'T', 'V', 'L', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCkptVersion = 1;

template <typename T>
struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<T> values;
};

template <typename T>
struct Checkpoint {
    std::vector<CheckpointEntry<T>> entries;
    nlohmann::json extra;  // counters, rng state, config echo

    const CheckpointEntry<T>* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    void add(const std::string& name, const Shape& shape, std::span<const T> values) {
        entries.push_back({name, shape, std::vector<T>(values.begin(), values.end())});
    }

    void add_params(const ParamStore<T>& ps, const std::string& prefix = "") {
        for (const auto& p : ps.all()) add(prefix + p.name(), p.shape(), p.value());
    }
};

namespace detail {

template <typename T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
    nlohmann::json manifest;
    manifest["dtype"] = detail::dtype_name<T>();
    manifest["extra"] = ckpt.extra;
    uint64_t offset = 0;
    auto& plist = manifest["params"] = nlohmann::json::array();
    for (const auto& e : ckpt.entries) {
        plist.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
        offset += e.values.size() * sizeof(T);
    }
    std::string mtxt = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kCkptMagic, 8);
    uint32_t ver = kCkptVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    uint64_t mlen = mtxt.size();
    f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    f.write(mtxt.data(), static_cast<std::streamsize>(mtxt.size()));
    for (const auto& e : ckpt.entries)
        f.write(reinterpret_cast<const char*>(e.values.data()),
                static_cast<std::streamsize>(e.values.size() * sizeof(T)));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    if (ver != kCkptVersion) throw std::runtime_error("load_checkpoint: unsupported version");
    uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mtxt(mlen, '\0');
    f.read(mtxt.data(), static_cast<std::streamsize>(mlen));
    nlohmann::json manifest = nlohmann::json::parse(mtxt);
    if (manifest.at("dtype").get<std::string>() != detail::dtype_name<T>())
        throw std::runtime_error("load_checkpoint: dtype mismatch (" +
                                 manifest.at("dtype").get<std::string>() + " file vs " +
                                 detail::dtype_name<T>() + " runtime)");

    Checkpoint<T> ckpt;
    ckpt.extra = manifest.value("extra", nlohmann::json::object());
    for (const auto& j : manifest.at("params")) {
        CheckpointEntry<T> e;
        e.name = j.at("name").get<std::string>();
        e.shape = j.at("shape").get<Shape>();
        e.values.resize(static_cast<size_t>(numel(e.shape)));
        f.read(reinterpret_cast<char*>(e.values.data()),
               static_cast<std::streamsize>(e.values.size() * sizeof(T)));
        ckpt.entries.push_back(std::move(e));
    }
    if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return ckpt;
}

// Copy matching entries (by name, with optional prefix) into a ParamStore.
template <typename T>
void restore_params(ParamStore<T>& ps, const Checkpoint<T>& ckpt, const std::string& prefix = "") {
    for (auto& p : ps.all()) {
        const auto* e = ckpt.find(prefix + p.name());
        if (!e) throw std::runtime_error("restore_params: missing entry " + prefix + p.name());
        require(e->shape == p.shape(), "restore_params: shape mismatch for " + p.name());
        std::copy(e->values.begin(), e->values.end(), p.mutable_value().begin());
    }
}

}  // namespace mtvl
