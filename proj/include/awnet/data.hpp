#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "awnet/errors.hpp"
#include "awnet/rng.hpp"
#include "awnet/tensor.hpp"

namespace awnet {

/// Labelled image set. Pixels live in [0,1]; record order is the load order
/// until an explicit (seeded, deterministic) shuffle.
struct DatasetHandle {
    std::size_t channels = 3;
    std::size_t image_size = 0;
    std::size_t num_classes = 0;
    std::vector<double> pixels;        // N * C * H * W, row-major
    std::vector<std::size_t> labels;   // N entries in [0, num_classes)

    std::size_t size() const { return labels.size(); }
    std::size_t sample_numel() const { return channels * image_size * image_size; }

    /// Materialises the given records as a [n, C, H, W] tensor.
    Tensor batch(const std::vector<std::size_t>& indices) const {
        Tensor out({indices.size(), channels, image_size, image_size});
        const std::size_t sn = sample_numel();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * sn), sn,
                        out.values().begin() + static_cast<std::ptrdiff_t>(i * sn));
        }
        return out;
    }

    std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& indices) const {
        std::vector<std::size_t> out(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
        return out;
    }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> idx(size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }

    /// Deterministic shuffle order for a given seed; the records themselves
    /// stay in place.
    std::vector<std::size_t> shuffled_indices(std::uint64_t seed) const {
        auto idx = all_indices();
        Rng rng(seed);
        rng.shuffle(idx);
        return idx;
    }

    DatasetHandle subset(const std::vector<std::size_t>& indices) const {
        DatasetHandle out;
        out.channels = channels;
        out.image_size = image_size;
        out.num_classes = num_classes;
        const std::size_t sn = sample_numel();
        out.pixels.resize(indices.size() * sn);
        out.labels.resize(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * sn), sn,
                        out.pixels.begin() + static_cast<std::ptrdiff_t>(i * sn));
            out.labels[i] = labels[indices[i]];
        }
        return out;
    }
};

enum class DataSplit { Train, Test };

namespace detail {

inline void read_cifar_file(const std::filesystem::path& file, DatasetHandle& out) {
    constexpr std::size_t kRecord = 3073;  // 1 label byte + 3*1024 pixel bytes
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ConfigError("cifar: cannot open " + file.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % kRecord != 0) {
        const std::size_t offset = (bytes.size() / kRecord) * kRecord;
        throw ConfigError("cifar: " + file.string() + " is not a whole number of 3073-byte records; trailing " +
                          "partial record starts at byte offset " + std::to_string(offset));
    }
    const std::size_t n = bytes.size() / kRecord;
    out.pixels.reserve(out.pixels.size() + n * 3072);
    out.labels.reserve(out.labels.size() + n);
    for (std::size_t r = 0; r < n; ++r) {
        const unsigned char label = bytes[r * kRecord];
        if (label >= 10) {
            throw ConfigError("cifar: " + file.string() + " record " + std::to_string(r) + " has label byte " +
                              std::to_string(static_cast<int>(label)) + " >= 10");
        }
        out.labels.push_back(label);
        for (std::size_t i = 0; i < 3072; ++i) {
            out.pixels.push_back(static_cast<double>(bytes[r * kRecord + 1 + i]) / 255.0);
        }
    }
}

}  // namespace detail

/// Loads the CIFAR-10 binary format (3073-byte records: one label byte, then
/// the 32x32 R, G and B planes row-major). `path` may be a single .bin file
/// or the dataset directory holding data_batch_1..5.bin / test_batch.bin.
inline DatasetHandle load_cifar_binary(const std::string& path, DataSplit split) {
    DatasetHandle out;
    out.channels = 3;
    out.image_size = 32;
    out.num_classes = 10;
    const std::filesystem::path p(path);
    if (std::filesystem::is_directory(p)) {
        if (split == DataSplit::Train) {
            for (int i = 1; i <= 5; ++i) {
                detail::read_cifar_file(p / ("data_batch_" + std::to_string(i) + ".bin"), out);
            }
        } else {
            detail::read_cifar_file(p / "test_batch.bin", out);
        }
    } else {
        detail::read_cifar_file(p, out);
    }
    return out;
}

/// Synthetic desk-scale dataset: each class is a smooth multi-bump prototype
/// image, samples add i.i.d. Gaussian pixel noise and clip to [0,1].
/// Deterministic for a given argument tuple.
inline DatasetHandle make_synthetic(std::size_t classes, std::size_t n_per_class, std::size_t size,
                                    std::uint64_t seed, double noise = 0.06) {
    if (classes < 2) throw ConfigError("make_synthetic: need at least 2 classes");
    if (size < 4) throw ConfigError("make_synthetic: image size must be >= 4");
    DatasetHandle out;
    out.channels = 3;
    out.image_size = size;
    out.num_classes = classes;

    Rng rng(seed);
    const std::size_t sn = 3 * size * size;
    std::vector<double> prototypes(classes * sn);
    constexpr std::size_t kBumps = 3;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
            double* plane = prototypes.data() + c * sn + ch * size * size;
            for (std::size_t i = 0; i < size * size; ++i) plane[i] = 0.5;
            for (std::size_t b = 0; b < kBumps; ++b) {
                const double cx = rng.uniform(0.0, static_cast<double>(size - 1));
                const double cy = rng.uniform(0.0, static_cast<double>(size - 1));
                const double sigma = rng.uniform(static_cast<double>(size) / 6.0, static_cast<double>(size) / 3.0);
                const double amp = rng.uniform(-0.45, 0.45);
                for (std::size_t y = 0; y < size; ++y) {
                    for (std::size_t x = 0; x < size; ++x) {
                        const double dx = static_cast<double>(x) - cx;
                        const double dy = static_cast<double>(y) - cy;
                        plane[y * size + x] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                    }
                }
            }
        }
    }

    out.pixels.resize(classes * n_per_class * sn);
    out.labels.resize(classes * n_per_class);
    std::size_t row = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t s = 0; s < n_per_class; ++s, ++row) {
            out.labels[row] = c;
            double* dst = out.pixels.data() + row * sn;
            const double* proto = prototypes.data() + c * sn;
            for (std::size_t i = 0; i < sn; ++i) {
                dst[i] = std::clamp(proto[i] + noise * rng.normal(), 0.0, 1.0);
            }
        }
    }
    return out;
}

/// Deterministic per-class train/holdout split.
inline std::pair<DatasetHandle, DatasetHandle> split_per_class(const DatasetHandle& data,
                                                               std::size_t holdout_per_class, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(data.num_classes);
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
    Rng rng(seed);
    std::vector<std::size_t> train_idx, hold_idx;
    for (auto& idx : by_class) {
        rng.shuffle(idx);
        const std::size_t h = std::min(holdout_per_class, idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < h ? hold_idx : train_idx).push_back(idx[i]);
        }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(hold_idx.begin(), hold_idx.end());
    return {data.subset(train_idx), data.subset(hold_idx)};
}

}  // namespace awnet
