#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

// CIFAR binary ingestion, channel normalization, pad-crop-flip augmentation,
// mixup/cutmix, and deterministic batch iteration. Batch composition is a
// pure function of (seed, epoch, batch index).

namespace vitrm {

constexpr int kImageSide = 32;
constexpr int kImageChannels = 3;
constexpr int kImagePixels = kImageSide * kImageSide;
constexpr int kImageBytes = kImageChannels * kImagePixels;

enum class CifarVariant { kCifar10, kCifar100 };

inline int num_classes(CifarVariant v) {
  return v == CifarVariant::kCifar10 ? 10 : 100;
}

struct ImageRecord {
  std::array<std::uint8_t, kImageBytes> pixels{};  // R, G, B planes
  int label = 0;
  int coarse_label = -1;  // CIFAR-100 only

  float pixel_unit(std::size_t i) const { return pixels[i] / 255.0f; }
};

struct Dataset {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> test;
  CifarVariant variant = CifarVariant::kCifar10;
};

struct DataStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stdev{1.0, 1.0, 1.0};
};

// Locates the directory holding the binary files ("cifar-10-batches-bin" /
// "cifar-100-binary"), accepting either that directory or its parent.
std::string resolve_cifar_dir(const std::string& dir, CifarVariant v);

// Strict parse of the canonical binary distribution: exact file sizes,
// exact record counts, labels in range. Errors name the file and offset.
Dataset load_cifar(const std::string& dir, CifarVariant v);

// Inverse of parsing: reproduces the exact source bytes of one record.
std::vector<std::uint8_t> serialize_record(const ImageRecord& rec,
                                           CifarVariant v);

// Single-pass per-channel mean/std over unit-scaled pixels.
DataStats compute_stats(const std::vector<ImageRecord>& records);

// Cached wrapper: reads <dir>/vitrm_stats.txt when present, otherwise
// computes from the records and writes the cache.
DataStats load_or_compute_stats(const std::string& resolved_dir,
                                const std::vector<ImageRecord>& train);

// Reflect-pad by 4, crop 32x32 at (dy, dx) in [0, 8]; offset (4, 4) is the
// identity crop.
ImageRecord pad_crop(const ImageRecord& rec, int dy, int dx);
ImageRecord hflip(const ImageRecord& rec);
ImageRecord augment_geometric(const ImageRecord& rec, std::mt19937_64& rng);

struct LabeledBatch {
  int size = 0;
  int classes = 0;
  std::vector<float> images;        // size * 3072, normalized
  std::vector<float> soft_targets;  // size * classes, rows sum to 1
  std::vector<int> hard_labels;     // dominant label per example
};

// Convex combination of the batch with a shuffled partner; targets mix with
// the same weight and the dominant label is recomputed from the mixed row.
void mixup(LabeledBatch& batch, double alpha, std::mt19937_64& rng);

// Pastes a random rectangle from a shuffled partner; targets mix with the
// realized area fraction.
void cutmix(LabeledBatch& batch, double alpha, std::mt19937_64& rng);

struct BatchOptions {
  int batch_size = 128;
  int num_classes = 10;
  bool train_mode = false;  // shuffle, augment, mix; eval normalizes only
  bool geometric = true;
  double mixup_alpha = 0.2;
  double cutmix_alpha = 1.0;
  double mixup_prob = 0.25;   // per batch: mixup, cutmix, or neither
  double cutmix_prob = 0.25;
  std::uint64_t seed = 0;
  long epoch = 0;
  long subset = 0;  // use only the first `subset` records when > 0
};

class BatchIter {
 public:
  BatchIter(const std::vector<ImageRecord>& records, const DataStats& stats,
            BatchOptions opts);

  bool next(LabeledBatch& out);
  long num_batches() const;
  long record_count() const { return static_cast<long>(order_.size()); }

 private:
  const std::vector<ImageRecord>* records_;
  DataStats stats_;
  BatchOptions opts_;
  std::vector<std::uint32_t> order_;
  long cursor_ = 0;
  long batch_index_ = 0;
};

// splitmix64-based stream derivation so every (seed, epoch, index) slot has
// an independent deterministic generator.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace vitrm
