#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "awnet/errors.hpp"
#include "awnet/model.hpp"
#include "awnet/tensor.hpp"

namespace awnet {

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string fnv1a64_hex(const std::string& s) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(s.data(), s.size());
    return os.str();
}

namespace detail {

inline void write_f64_le(std::ostream& os, const std::vector<double>& v) {
    for (double d : v) {
        const auto bits = std::bit_cast<std::uint64_t>(d);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        os.write(reinterpret_cast<const char*>(buf), 8);
    }
}

inline std::vector<double> read_f64_le(std::istream& is, std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char buf[8];
        is.read(reinterpret_cast<char*>(buf), 8);
        if (!is) throw ConfigError("checkpoint: blob ended early");
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

}  // namespace detail

/// On-disk model snapshot: a JSON manifest (version, architecture descriptor,
/// tensor names/shapes/hashes) plus one raw little-endian float64 blob per
/// tensor. save -> load -> save round-trips byte-identically.
struct Checkpoint {
    static constexpr int kFormatVersion = 1;

    int format_version = kFormatVersion;
    std::string architecture;
    std::string config_hash;
    std::size_t epoch = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;  // parameters, stats, optimizer state

    static Checkpoint from_model(Model& model, const std::string& config_hash = "", std::size_t epoch = 0) {
        Checkpoint ck;
        ck.architecture = model.model_spec().descriptor();
        ck.config_hash = config_hash;
        ck.epoch = epoch;
        model.visit_params([&ck](const std::string& name, Tensor& t) {
            ck.tensors.emplace_back("param." + name, t.clone());
        });
        model.visit_stats([&ck](const std::string& name, std::vector<double>& v) {
            ck.tensors.emplace_back("stats." + name, Tensor::from({v.size()}, std::vector<double>(v)));
        });
        return ck;
    }

    /// Restores parameters and running stats into a model whose architecture
    /// descriptor matches; anything else is rejected.
    void into_model(Model& model) const {
        if (model.model_spec().descriptor() != architecture) {
            throw ConfigError("checkpoint: architecture '" + architecture + "' does not match model '" +
                              model.model_spec().descriptor() + "'");
        }
        std::map<std::string, const Tensor*> by_name;
        for (const auto& [name, t] : tensors) by_name[name] = &t;
        model.visit_params([&](const std::string& name, Tensor& t) {
            auto it = by_name.find("param." + name);
            if (it == by_name.end()) throw ConfigError("checkpoint: missing tensor param." + name);
            if (it->second->shape() != t.shape()) {
                throw ConfigError("checkpoint: shape mismatch for param." + name);
            }
            t.values() = it->second->values();
        });
        model.visit_stats([&](const std::string& name, std::vector<double>& v) {
            auto it = by_name.find("stats." + name);
            if (it == by_name.end()) throw ConfigError("checkpoint: missing tensor stats." + name);
            if (it->second->numel() != v.size()) throw ConfigError("checkpoint: size mismatch for stats." + name);
            v = it->second->values();
        });
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir / "blobs");
        nlohmann::json manifest;
        manifest["format_version"] = format_version;
        manifest["architecture"] = architecture;
        manifest["config_hash"] = config_hash;
        manifest["epoch"] = epoch;
        nlohmann::json entries = nlohmann::json::array();
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto& [name, t] = tensors[i];
            std::ostringstream fname;
            fname << 't' << std::setw(5) << std::setfill('0') << i << ".f64";
            {
                std::ofstream blob(dir / "blobs" / fname.str(), std::ios::binary | std::ios::trunc);
                if (!blob) throw ConfigError("checkpoint: cannot write " + (dir / "blobs" / fname.str()).string());
                detail::write_f64_le(blob, t.values());
            }
            nlohmann::json e;
            e["name"] = name;
            e["shape"] = t.shape();
            e["file"] = "blobs/" + fname.str();
            e["fnv64"] = fnv1a64_hex(std::string(reinterpret_cast<const char*>(t.values().data()),
                                                 t.values().size() * sizeof(double)));
            entries.push_back(e);
        }
        manifest["tensors"] = entries;
        std::ofstream out(dir / "manifest.json", std::ios::trunc);
        if (!out) throw ConfigError("checkpoint: cannot write manifest in " + dir.string());
        out << manifest.dump(2) << '\n';
    }

    static Checkpoint load(const std::filesystem::path& dir) {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw ConfigError("checkpoint: no manifest.json in " + dir.string());
        nlohmann::json manifest = nlohmann::json::parse(in);
        Checkpoint ck;
        ck.format_version = manifest.at("format_version").get<int>();
        if (ck.format_version > kFormatVersion) {
            throw ConfigError("checkpoint: format version " + std::to_string(ck.format_version) +
                              " is newer than supported version " + std::to_string(kFormatVersion));
        }
        ck.architecture = manifest.at("architecture").get<std::string>();
        ck.config_hash = manifest.at("config_hash").get<std::string>();
        ck.epoch = manifest.at("epoch").get<std::size_t>();
        for (const auto& e : manifest.at("tensors")) {
            const auto name = e.at("name").get<std::string>();
            const auto shape = e.at("shape").get<Shape>();
            std::ifstream blob(dir / e.at("file").get<std::string>(), std::ios::binary);
            if (!blob) throw ConfigError("checkpoint: missing blob for " + name);
            std::size_t count = 1;
            for (std::size_t d : shape) count *= d;
            auto values = detail::read_f64_le(blob, count);
            const auto hash = fnv1a64_hex(
                std::string(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double)));
            if (hash != e.at("fnv64").get<std::string>()) {
                throw ConfigError("checkpoint: blob hash mismatch for " + name);
            }
            ck.tensors.emplace_back(name, Tensor::from(shape, std::move(values)));
        }
        return ck;
    }
};

/// Rebuilds a freshly initialised model matching a checkpoint's architecture
/// descriptor; the caller then loads the checkpoint into it.
inline std::unique_ptr<Model> model_from_descriptor(const std::string& descriptor) {
    const ModelSpec spec = ModelSpec::parse(descriptor);
    Rng rng(0);
    if (spec.kind == "awnet") return std::make_unique<AWNetModel>(AWNetModel::make(spec, rng));
    if (spec.kind == "plain") return std::make_unique<PlainNet>(PlainNet::make(spec, rng));
    return std::make_unique<BaselineNet>(BaselineNet::make(spec, rng));
}

inline std::unique_ptr<Model> load_model(const std::filesystem::path& dir) {
    Checkpoint ck = Checkpoint::load(dir);
    auto model = model_from_descriptor(ck.architecture);
    ck.into_model(*model);
    return model;
}

}  // namespace awnet
