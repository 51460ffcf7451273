#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace sem {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImagePlane = kImageSide * kImageSide;
inline constexpr std::size_t kImagePixels = kImageChannels * kImagePlane;

/// One labeled (3,32,32) image, channel-planar and row-major.
struct DatasetRecord {
    std::vector<float> image;  // kImagePixels values; in [0,1] until normalized
    int label = 0;
    int coarse_label = -1;  // CIFAR-100 only

    bool operator==(const DatasetRecord&) const = default;
};

enum class CifarVariant { cifar10 = 10, cifar100 = 100 };

inline std::size_t record_stride(CifarVariant v) { return v == CifarVariant::cifar10 ? 3073 : 3074; }
inline int num_classes(CifarVariant v) { return static_cast<int>(v); }

// ---------------------------------------------------------------------------
// CIFAR binary format
// ---------------------------------------------------------------------------

/// Decode a whole CIFAR binary file. `base_offset` is only used in error messages.
inline std::vector<DatasetRecord> decode_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant,
                                               std::uint64_t base_offset = 0) {
    const std::size_t stride = record_stride(variant);
    const std::size_t labels = stride - kImagePixels;
    if (bytes.size() % stride != 0) {
        throw IngestionError("truncated CIFAR-" + std::to_string(num_classes(variant)) + " record: file size " +
                                 std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(stride),
                             base_offset + bytes.size() / stride * stride);
    }
    const std::size_t count = bytes.size() / stride;
    std::vector<DatasetRecord> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* rec = bytes.data() + i * stride;
        auto& r = out[i];
        if (variant == CifarVariant::cifar100) {
            if (rec[0] >= 20) throw IngestionError("coarse label " + std::to_string(rec[0]) + " >= 20", base_offset + i * stride);
            r.coarse_label = rec[0];
        }
        const int label = rec[labels - 1];
        if (label >= num_classes(variant)) {
            throw IngestionError("label " + std::to_string(label) + " >= " + std::to_string(num_classes(variant)),
                                 base_offset + i * stride + labels - 1);
        }
        r.label = label;
        r.image.resize(kImagePixels);
        for (std::size_t p = 0; p < kImagePixels; ++p) r.image[p] = static_cast<float>(rec[labels + p]) / 255.0f;
    }
    return out;
}

/// Inverse of decode_cifar for one record with pixel values in [0,1].
inline std::vector<std::uint8_t> encode_cifar(const DatasetRecord& r, CifarVariant variant) {
    std::vector<std::uint8_t> out;
    out.reserve(record_stride(variant));
    if (variant == CifarVariant::cifar100) out.push_back(static_cast<std::uint8_t>(std::max(r.coarse_label, 0)));
    out.push_back(static_cast<std::uint8_t>(r.label));
    for (float v : r.image) {
        const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
        out.push_back(static_cast<std::uint8_t>(q));
    }
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + path.string(), 0);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Decode one file that must hold exactly `expected_records` records.
inline std::vector<DatasetRecord> load_cifar_file(const std::filesystem::path& path, CifarVariant variant,
                                                  std::size_t expected_records) {
    auto bytes = read_file_bytes(path);
    const std::size_t expected_bytes = expected_records * record_stride(variant);
    if (bytes.size() % record_stride(variant) == 0 && bytes.size() != expected_bytes) {
        throw IngestionError(path.string() + ": holds " + std::to_string(bytes.size() / record_stride(variant)) +
                                 " records, expected " + std::to_string(expected_records),
                             std::min(bytes.size(), expected_bytes));
    }
    try {
        return decode_cifar(bytes, variant);
    } catch (const IngestionError& e) {
        throw IngestionError(path.string() + ": " + e.detail(), e.offset());
    }
}

struct CifarSplits {
    std::vector<DatasetRecord> train;
    std::vector<DatasetRecord> test;
};

/// Locate the directory holding the binary files under `root`.
inline std::filesystem::path find_cifar_dir(const std::filesystem::path& root, CifarVariant variant) {
    const char* marker = variant == CifarVariant::cifar10 ? "data_batch_1.bin" : "train.bin";
    const char* sub = variant == CifarVariant::cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
    for (const auto& dir : {root, root / sub}) {
        if (std::filesystem::exists(dir / marker)) return dir;
    }
    throw IngestionError("no CIFAR-" + std::to_string(num_classes(variant)) + " binary files under " + root.string(), 0);
}

/// 50,000 train and 10,000 test records in file order.
inline CifarSplits load_cifar(const std::filesystem::path& root, CifarVariant variant) {
    const auto dir = find_cifar_dir(root, variant);
    CifarSplits out;
    if (variant == CifarVariant::cifar10) {
        for (int i = 1; i <= 5; ++i) {
            auto part = load_cifar_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), variant, 10000);
            out.train.insert(out.train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
        }
        out.test = load_cifar_file(dir / "test_batch.bin", variant, 10000);
    } else {
        out.train = load_cifar_file(dir / "train.bin", variant, 50000);
        out.test = load_cifar_file(dir / "test.bin", variant, 10000);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct ChannelStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};
};

/// Per-channel mean and population standard deviation over all pixels of `records`.
inline ChannelStats compute_channel_stats(std::span<const DatasetRecord> records) {
    ChannelStats s;
    if (records.empty()) return s;
    const double count = static_cast<double>(records.size() * kImagePlane);
    for (std::size_t c = 0; c < kImageChannels; ++c) {
        double acc = 0.0;
        for (const auto& r : records)
            for (std::size_t p = 0; p < kImagePlane; ++p) acc += r.image[c * kImagePlane + p];
        const double mu = acc / count;
        double sq = 0.0;
        for (const auto& r : records)
            for (std::size_t p = 0; p < kImagePlane; ++p) {
                const double d = r.image[c * kImagePlane + p] - mu;
                sq += d * d;
            }
        s.mean[c] = mu;
        s.std[c] = std::sqrt(sq / count);
    }
    return s;
}

inline void normalize_in_place(DatasetRecord& r, const ChannelStats& s) {
    for (std::size_t c = 0; c < kImageChannels; ++c) {
        if (!(s.std[c] > 0.0)) throw DomainError("normalize: channel " + std::to_string(c) + " has non-positive std");
        const float mu = static_cast<float>(s.mean[c]);
        const float inv = static_cast<float>(1.0 / s.std[c]);
        for (std::size_t p = 0; p < kImagePlane; ++p) {
            auto& v = r.image[c * kImagePlane + p];
            v = (v - mu) * inv;
        }
    }
}

/// (pixel - mean_c) / std_c.
inline DatasetRecord normalize(DatasetRecord r, const ChannelStats& s) {
    normalize_in_place(r, s);
    return r;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
    int crop_pad = 4;
    double flip_prob = 0.5;
    bool enabled = true;

    void validate() const {
        if (crop_pad < 0) throw DomainError("augment: crop_pad must be >= 0");
        if (flip_prob < 0.0 || flip_prob > 1.0) throw DomainError("augment: flip_prob must lie in [0,1]");
    }
};

/// Crop a 32x32 window at (dy, dx) from the image zero-padded by `pad`, then optionally
/// mirror horizontally.
inline DatasetRecord crop_and_flip(const DatasetRecord& r, int pad, int dy, int dx, bool flip) {
    DatasetRecord out = r;
    const int side = static_cast<int>(kImageSide);
    for (std::size_t c = 0; c < kImageChannels; ++c) {
        const float* src = r.image.data() + c * kImagePlane;
        float* dst = out.image.data() + c * kImagePlane;
        for (int y = 0; y < side; ++y) {
            const int sy = y + dy - pad;
            for (int x = 0; x < side; ++x) {
                const int sx = (flip ? side - 1 - x : x) + dx - pad;
                const bool inside = sy >= 0 && sy < side && sx >= 0 && sx < side;
                dst[y * side + x] = inside ? src[sy * side + sx] : 0.0f;
            }
        }
    }
    return out;
}

/// Random crop from the zero-padded image plus random horizontal flip. Identity when disabled.
inline DatasetRecord augment(const DatasetRecord& r, const AugmentConfig& cfg, RngState& rng) {
    if (!cfg.enabled) return r;
    cfg.validate();
    const auto dy = static_cast<int>(rng.integer(0, 2 * cfg.crop_pad));
    const auto dx = static_cast<int>(rng.integer(0, 2 * cfg.crop_pad));
    const bool flip = rng.bernoulli(cfg.flip_prob);
    return crop_and_flip(r, cfg.crop_pad, dy, dx, flip);
}

// ---------------------------------------------------------------------------
// Synthetic fixtures
// ---------------------------------------------------------------------------

/// Class-conditional Gaussian blobs: each class owns a blob centre and colour; samples add
/// small positional jitter and pixel noise. Labels are assigned round-robin.
inline std::vector<DatasetRecord> synthetic_dataset(std::size_t n, int classes, std::uint64_t seed) {
    if (classes < 1 || n < static_cast<std::size_t>(classes)) {
        throw DomainError("synthetic_dataset: need n >= classes >= 1");
    }
    struct Prototype {
        double cy, cx, sigma;
        std::array<double, 3> colour;
    };
    RngState proto_rng(seed, 1);
    std::vector<Prototype> protos(static_cast<std::size_t>(classes));
    for (auto& p : protos) {
        p.cy = proto_rng.uniform(6.0, 26.0);
        p.cx = proto_rng.uniform(6.0, 26.0);
        p.sigma = proto_rng.uniform(3.0, 6.0);
        for (auto& c : p.colour) c = proto_rng.uniform(0.2, 1.0);
    }
    RngState rng(seed, 2);
    std::vector<DatasetRecord> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& r = out[i];
        r.label = static_cast<int>(i % static_cast<std::size_t>(classes));
        const auto& p = protos[static_cast<std::size_t>(r.label)];
        const double cy = p.cy + rng.uniform(-1.0, 1.0);
        const double cx = p.cx + rng.uniform(-1.0, 1.0);
        r.image.resize(kImagePixels);
        for (std::size_t c = 0; c < kImageChannels; ++c) {
            for (std::size_t y = 0; y < kImageSide; ++y) {
                for (std::size_t x = 0; x < kImageSide; ++x) {
                    const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    const double blob = p.colour[c] * std::exp(-d2 / (2.0 * p.sigma * p.sigma));
                    const double v = 0.1 + 0.8 * blob + rng.normal(0.0, 0.03);
                    r.image[c * kImagePlane + y * kImageSide + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Permutation of [0, n) keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngState rng(seed, epoch);
    std::shuffle(order.begin(), order.end(), rng.engine());
    return order;
}

template <typename T>
struct Batch {
    Tensor<T> images;  // (B,3,32,32)
    std::vector<int> labels;
    std::vector<std::size_t> indices;
};

struct BatchOptions {
    bool shuffle = true;
    std::optional<AugmentConfig> augment;
    std::optional<ChannelStats> normalization;
    std::uint64_t worker = 0;
};

/// Deterministic epoch stream of batches; the final partial batch is kept. Augmentation
/// draws from a stream keyed by (seed, epoch, worker).
template <typename T>
class BatchIterator {
  public:
    BatchIterator(std::span<const DatasetRecord> records, std::size_t batch_size, std::uint64_t seed,
                  std::uint64_t epoch, BatchOptions options = {})
        : records_(records), batch_size_(batch_size), options_(std::move(options)),
          augment_rng_(RngState(seed, epoch).fork(1 + options_.worker)) {
        if (batch_size < 1) throw DomainError("batch_iterator: batch_size must be >= 1");
        if (options_.shuffle) {
            order_ = epoch_order(records.size(), seed, epoch);
        } else {
            order_.resize(records.size());
            std::iota(order_.begin(), order_.end(), std::size_t{0});
        }
    }

    std::size_t batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

    std::optional<Batch<T>> next() {
        if (cursor_ >= order_.size()) return std::nullopt;
        const std::size_t count = std::min(batch_size_, order_.size() - cursor_);
        Batch<T> batch;
        std::vector<T> pixels(count * kImagePixels);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t idx = order_[cursor_ + i];
            batch.indices.push_back(idx);
            batch.labels.push_back(records_[idx].label);
            const DatasetRecord* src = &records_[idx];
            DatasetRecord scratch;
            if (options_.augment && options_.augment->enabled) {
                scratch = augment(*src, *options_.augment, augment_rng_);
                src = &scratch;
            }
            if (options_.normalization) {
                if (src != &scratch) scratch = *src;
                normalize_in_place(scratch, *options_.normalization);
                src = &scratch;
            }
            std::copy(src->image.begin(), src->image.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * kImagePixels));
        }
        cursor_ += count;
        batch.images = Tensor<T>::from({count, kImageChannels, kImageSide, kImageSide}, std::move(pixels));
        return batch;
    }

  private:
    std::span<const DatasetRecord> records_;
    std::size_t batch_size_;
    BatchOptions options_;
    RngState augment_rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace sem
