#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mfi/error.hpp"
#include "mfi/rng.hpp"
#include "mfi/tensor.hpp"

namespace mfi::data {

enum class DatasetKind { Cifar10, Cifar100, Synthetic };

DatasetKind parse_dataset_kind(std::string_view text);
std::string_view to_string(DatasetKind kind);

/// Images [N, 3, H, W] in [0, 1] with integer labels.
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::vector<int> coarse_labels;  // CIFAR-100 only
    int classes = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t image_size() const { return images.dim(2); }
    Dataset subset(std::span<const std::int64_t> indices) const;
    /// Single image [3, H, W].
    Tensor image(std::int64_t i) const;
};

// ---------------------------------------------------------------------------
// CIFAR binary format: per record, label byte(s) then 3072 pixel bytes
// (R plane, G plane, B plane; each 32x32 row-major).
// ---------------------------------------------------------------------------

inline constexpr std::int64_t kCifarPixels = 3 * 32 * 32;
std::int64_t cifar_record_size(DatasetKind kind);

/// Throws TruncationError if the size is not a whole number of records and
/// CorruptionError on an out-of-range label.
Dataset parse_cifar_records(std::span<const std::uint8_t> bytes, DatasetKind kind);
/// Inverse of parse_cifar_records (pixels rounded to the nearest byte).
std::vector<std::uint8_t> serialize_cifar_records(const Dataset& ds, DatasetKind kind);

enum class Split { Train, Test };
/// Reads the standard binary distribution layout under `root`
/// (data_batch_1..5.bin / test_batch.bin, or train.bin / test.bin).
Dataset load_cifar_binary(const std::filesystem::path& root, DatasetKind kind, Split split);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    std::uint64_t seed = 0;
    std::int64_t n = 1000;
    int classes = 10;
    std::int64_t image_size = 32;
    /// Distance between class templates, in units of the pixel noise std.
    double separation = 3.0;
    double noise = 0.15;
    /// Maximum random translation of the template, in pixels.
    int max_shift = 4;
};

/// Class-conditional Gaussian-blob images: each class has a fixed template of
/// coloured blobs; samples add a random shift and Gaussian pixel noise.
/// Labels are balanced (i mod classes, then shuffled).
Dataset synthetic_dataset(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------
// Splits, augmentation, batching
// ---------------------------------------------------------------------------

struct DatasetSpec {
    DatasetKind kind = DatasetKind::Synthetic;
    std::filesystem::path root;
    std::uint64_t seed = 0;
    int classes = 10;
    std::int64_t train_size = 0;  // 0: everything available
    std::int64_t val_size = 0;
    std::int64_t test_size = 0;
    std::int64_t image_size = 32;
    double separation = 3.0;
    double noise = 0.15;
};

struct Splits {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Disjoint train / validation / test splits; validation is carved from the
/// training records.
Splits load_splits(const DatasetSpec& spec);

struct ChannelNorm {
    std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
    std::array<float, 3> std{1.0f, 1.0f, 1.0f};
};

ChannelNorm channel_stats(const Dataset& ds);

struct AugmentConfig {
    bool random_crop = true;
    int padding = 4;
    double flip_prob = 0.5;
    ChannelNorm norm;
};

/// Zero-pad and random crop, random horizontal flip; no normalization.
Tensor augment_geometry(const Tensor& image, const AugmentConfig& cfg, SeededRng& rng);
Tensor flip_horizontal(const Tensor& image);
/// (x - mean) / std per channel, for [3, H, W] or [B, 3, H, W].
Tensor normalize(const Tensor& images, const ChannelNorm& norm);
/// augment_geometry followed by normalize.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, SeededRng& rng);

struct Batch {
    Tensor images;  // normalized [B, 3, H, W]
    std::vector<int> labels;
};

/// Shuffled, augmented mini-batches for one epoch. All randomness comes from
/// `rng`, so an epoch is reproducible from its seed.
std::vector<std::vector<std::int64_t>> epoch_order(std::int64_t n, std::int64_t batch_size, SeededRng& rng);
Batch make_batch(const Dataset& ds, std::span<const std::int64_t> indices, const AugmentConfig& cfg,
                 SeededRng* rng);

/// Deterministic, unaugmented batches in dataset order.
std::vector<Batch> eval_batches(const Dataset& ds, std::int64_t batch_size, const ChannelNorm& norm);

}  // namespace mfi::data
