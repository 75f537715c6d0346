#include "vitrm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace vitrm {

namespace {

constexpr long kCifar10Record = 3073;   // label + 3072 pixels
constexpr long kCifar100Record = 3074;  // coarse + fine + 3072 pixels
constexpr long kRecordsPerFile = 10000;

[[noreturn]] void ingest_error(const std::string& file, long offset,
                               const std::string& what) {
  throw std::runtime_error("cifar ingest: " + file + " (offset " +
                           std::to_string(offset) + "): " + what);
}

std::vector<std::uint8_t> read_file(const std::string& path,
                                    long expected_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cifar ingest: cannot open " + path);
  in.seekg(0, std::ios::end);
  const long actual = static_cast<long>(in.tellg());
  if (actual != expected_size)
    throw std::runtime_error("cifar ingest: " + path + ": expected " +
                             std::to_string(expected_size) + " bytes, got " +
                             std::to_string(actual));
  in.seekg(0);
  std::vector<std::uint8_t> bytes(actual);
  in.read(reinterpret_cast<char*>(bytes.data()), actual);
  if (!in) throw std::runtime_error("cifar ingest: short read on " + path);
  return bytes;
}

void parse_file(const std::string& path, CifarVariant v,
                std::vector<ImageRecord>& out) {
  const long rec_size =
      v == CifarVariant::kCifar10 ? kCifar10Record : kCifar100Record;
  const long count = v == CifarVariant::kCifar10
                         ? kRecordsPerFile
                         : (path.find("train.bin") != std::string::npos
                                ? 5 * kRecordsPerFile
                                : kRecordsPerFile);
  auto bytes = read_file(path, rec_size * count);
  for (long r = 0; r < count; ++r) {
    const std::uint8_t* p = bytes.data() + r * rec_size;
    ImageRecord rec;
    if (v == CifarVariant::kCifar10) {
      rec.label = p[0];
      if (rec.label >= 10)
        ingest_error(path, r * rec_size, "label " +
                                             std::to_string(rec.label) +
                                             " out of range [0, 10)");
      std::copy_n(p + 1, kImageBytes, rec.pixels.begin());
    } else {
      rec.coarse_label = p[0];
      rec.label = p[1];
      if (rec.coarse_label >= 20)
        ingest_error(path, r * rec_size,
                     "coarse label " + std::to_string(rec.coarse_label) +
                         " out of range [0, 20)");
      if (rec.label >= 100)
        ingest_error(path, r * rec_size + 1,
                     "label " + std::to_string(rec.label) +
                         " out of range [0, 100)");
      std::copy_n(p + 2, kImageBytes, rec.pixels.begin());
    }
    out.push_back(rec);
  }
}

}  // namespace

std::string resolve_cifar_dir(const std::string& dir, CifarVariant v) {
  const std::string canonical = v == CifarVariant::kCifar10
                                    ? "cifar-10-batches-bin"
                                    : "cifar-100-binary";
  const std::string probe =
      v == CifarVariant::kCifar10 ? "data_batch_1.bin" : "train.bin";
  if (fs::exists(fs::path(dir) / probe)) return dir;
  if (fs::exists(fs::path(dir) / canonical / probe))
    return (fs::path(dir) / canonical).string();
  throw std::runtime_error("cifar ingest: no " + probe + " under " + dir +
                           " or " + (fs::path(dir) / canonical).string());
}

Dataset load_cifar(const std::string& dir, CifarVariant v) {
  const std::string root = resolve_cifar_dir(dir, v);
  Dataset ds;
  ds.variant = v;
  if (v == CifarVariant::kCifar10) {
    for (int i = 1; i <= 5; ++i)
      parse_file((fs::path(root) / ("data_batch_" + std::to_string(i) +
                                    ".bin")).string(),
                 v, ds.train);
    parse_file((fs::path(root) / "test_batch.bin").string(), v, ds.test);
  } else {
    parse_file((fs::path(root) / "train.bin").string(), v, ds.train);
    parse_file((fs::path(root) / "test.bin").string(), v, ds.test);
  }
  return ds;
}

std::vector<std::uint8_t> serialize_record(const ImageRecord& rec,
                                           CifarVariant v) {
  std::vector<std::uint8_t> out;
  if (v == CifarVariant::kCifar10) {
    out.reserve(kCifar10Record);
    out.push_back(static_cast<std::uint8_t>(rec.label));
  } else {
    out.reserve(kCifar100Record);
    out.push_back(static_cast<std::uint8_t>(rec.coarse_label));
    out.push_back(static_cast<std::uint8_t>(rec.label));
  }
  out.insert(out.end(), rec.pixels.begin(), rec.pixels.end());
  return out;
}

DataStats compute_stats(const std::vector<ImageRecord>& records) {
  DataStats s;
  if (records.empty()) return s;
  for (int c = 0; c < kImageChannels; ++c) {
    double sum = 0.0, sumsq = 0.0;
    for (const auto& rec : records)
      for (int i = 0; i < kImagePixels; ++i) {
        const double v = rec.pixel_unit(c * kImagePixels + i);
        sum += v;
        sumsq += v * v;
      }
    const double n = static_cast<double>(records.size()) * kImagePixels;
    const double mean = sum / n;
    s.mean[c] = mean;
    s.stdev[c] = std::sqrt(std::max(sumsq / n - mean * mean, 1e-12));
  }
  return s;
}

DataStats load_or_compute_stats(const std::string& resolved_dir,
                                const std::vector<ImageRecord>& train) {
  const fs::path cache = fs::path(resolved_dir) / "vitrm_stats.txt";
  if (fs::exists(cache)) {
    std::ifstream in(cache);
    DataStats s;
    if (in >> s.mean[0] >> s.mean[1] >> s.mean[2] >> s.stdev[0] >>
        s.stdev[1] >> s.stdev[2])
      return s;
  }
  DataStats s = compute_stats(train);
  std::ofstream out(cache);
  if (out) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n%.17g %.17g %.17g\n",
                  s.mean[0], s.mean[1], s.mean[2], s.stdev[0], s.stdev[1],
                  s.stdev[2]);
    out << buf;
  }
  return s;
}

namespace {

inline int reflect_index(int i) {
  if (i < 0) return -i;
  if (i >= kImageSide) return 2 * kImageSide - 2 - i;
  return i;
}

}  // namespace

ImageRecord pad_crop(const ImageRecord& rec, int dy, int dx) {
  ImageRecord out = rec;
  for (int c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < kImageSide; ++y)
      for (int x = 0; x < kImageSide; ++x) {
        const int sy = reflect_index(y + dy - 4);
        const int sx = reflect_index(x + dx - 4);
        out.pixels[c * kImagePixels + y * kImageSide + x] =
            rec.pixels[c * kImagePixels + sy * kImageSide + sx];
      }
  return out;
}

ImageRecord hflip(const ImageRecord& rec) {
  ImageRecord out = rec;
  for (int c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < kImageSide; ++y)
      for (int x = 0; x < kImageSide; ++x)
        out.pixels[c * kImagePixels + y * kImageSide + x] =
            rec.pixels[c * kImagePixels + y * kImageSide +
                       (kImageSide - 1 - x)];
  return out;
}

ImageRecord augment_geometric(const ImageRecord& rec, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> off(0, 8);
  const int dy = off(rng);
  const int dx = off(rng);
  ImageRecord out = pad_crop(rec, dy, dx);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < 0.5) out = hflip(out);
  return out;
}

namespace {

double sample_beta(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  if (a + b <= 0.0) return 0.5;
  return a / (a + b);
}

std::vector<std::uint32_t> partner_permutation(int n, std::mt19937_64& rng) {
  std::vector<std::uint32_t> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

void relabel_from_targets(LabeledBatch& batch) {
  for (int i = 0; i < batch.size; ++i) {
    const float* row = batch.soft_targets.data() + i * batch.classes;
    int best = 0;
    for (int c = 1; c < batch.classes; ++c)
      if (row[c] > row[best]) best = c;  // ties keep the lowest index
    batch.hard_labels[i] = best;
  }
}

}  // namespace

void mixup(LabeledBatch& batch, double alpha, std::mt19937_64& rng) {
  if (alpha <= 0.0)
    throw std::invalid_argument("mixup: alpha must be positive");
  const double lam = sample_beta(alpha, rng);
  const auto perm = partner_permutation(batch.size, rng);
  const float lamf = static_cast<float>(lam);

  std::vector<float> img_src = batch.images;
  std::vector<float> tgt_src = batch.soft_targets;
  for (int i = 0; i < batch.size; ++i) {
    const int j = static_cast<int>(perm[i]);
    float* img = batch.images.data() + static_cast<long>(i) * kImageBytes;
    const float* part = img_src.data() + static_cast<long>(j) * kImageBytes;
    for (int p = 0; p < kImageBytes; ++p)
      img[p] = lamf * img[p] + (1.0f - lamf) * part[p];
    float* tgt = batch.soft_targets.data() + i * batch.classes;
    const float* tpart = tgt_src.data() + j * batch.classes;
    for (int c = 0; c < batch.classes; ++c)
      tgt[c] = lamf * tgt[c] + (1.0f - lamf) * tpart[c];
  }
  relabel_from_targets(batch);
}

void cutmix(LabeledBatch& batch, double alpha, std::mt19937_64& rng) {
  if (alpha <= 0.0)
    throw std::invalid_argument("cutmix: alpha must be positive");
  const double lam = sample_beta(alpha, rng);
  const auto perm = partner_permutation(batch.size, rng);

  const double cut = std::sqrt(std::max(0.0, 1.0 - lam));
  const int cut_w = static_cast<int>(kImageSide * cut);
  const int cut_h = cut_w;
  std::uniform_int_distribution<int> pos(0, kImageSide - 1);
  const int cx = pos(rng);
  const int cy = pos(rng);
  const int x1 = std::clamp(cx - cut_w / 2, 0, kImageSide);
  const int x2 = std::clamp(cx + cut_w / 2, 0, kImageSide);
  const int y1 = std::clamp(cy - cut_h / 2, 0, kImageSide);
  const int y2 = std::clamp(cy + cut_h / 2, 0, kImageSide);
  const long area = static_cast<long>(x2 - x1) * (y2 - y1);
  const double lam_adj =
      1.0 - static_cast<double>(area) / (kImageSide * kImageSide);
  const float lamf = static_cast<float>(lam_adj);

  std::vector<float> img_src = batch.images;
  std::vector<float> tgt_src = batch.soft_targets;
  for (int i = 0; i < batch.size; ++i) {
    const int j = static_cast<int>(perm[i]);
    float* img = batch.images.data() + static_cast<long>(i) * kImageBytes;
    const float* part = img_src.data() + static_cast<long>(j) * kImageBytes;
    for (int c = 0; c < kImageChannels; ++c)
      for (int y = y1; y < y2; ++y)
        for (int x = x1; x < x2; ++x) {
          const int p = c * kImagePixels + y * kImageSide + x;
          img[p] = part[p];
        }
    float* tgt = batch.soft_targets.data() + i * batch.classes;
    const float* tpart = tgt_src.data() + j * batch.classes;
    for (int c = 0; c < batch.classes; ++c)
      tgt[c] = lamf * tgt[c] + (1.0f - lamf) * tpart[c];
  }
  relabel_from_targets(batch);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1) +
                    0xbf58476d1ce4e5b9ull * (c + 1);
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

BatchIter::BatchIter(const std::vector<ImageRecord>& records,
                     const DataStats& stats, BatchOptions opts)
    : records_(&records), stats_(stats), opts_(opts) {
  if (opts_.batch_size < 1)
    throw std::invalid_argument("batch_iter: batch_size must be >= 1");
  long n = static_cast<long>(records.size());
  if (opts_.subset > 0) n = std::min(n, opts_.subset);
  order_.resize(n);
  for (long i = 0; i < n; ++i) order_[i] = static_cast<std::uint32_t>(i);
  if (opts_.train_mode) {
    std::mt19937_64 rng(mix_seed(opts_.seed, opts_.epoch));
    std::shuffle(order_.begin(), order_.end(), rng);
  }
}

long BatchIter::num_batches() const {
  const long n = static_cast<long>(order_.size());
  return (n + opts_.batch_size - 1) / opts_.batch_size;
}

bool BatchIter::next(LabeledBatch& out) {
  const long n = static_cast<long>(order_.size());
  if (cursor_ >= n) return false;
  const long take = std::min<long>(opts_.batch_size, n - cursor_);

  out.size = static_cast<int>(take);
  out.classes = opts_.num_classes;
  out.images.assign(take * kImageBytes, 0.0f);
  out.soft_targets.assign(take * opts_.num_classes, 0.0f);
  out.hard_labels.assign(take, 0);

  std::mt19937_64 rng(
      mix_seed(opts_.seed, opts_.epoch, 0x100 + batch_index_));
  std::array<float, 3> inv_std;
  std::array<float, 3> mean;
  for (int c = 0; c < 3; ++c) {
    mean[c] = static_cast<float>(stats_.mean[c]);
    inv_std[c] = static_cast<float>(1.0 / stats_.stdev[c]);
  }

  for (long i = 0; i < take; ++i) {
    const ImageRecord& base = (*records_)[order_[cursor_ + i]];
    ImageRecord rec = (opts_.train_mode && opts_.geometric)
                          ? augment_geometric(base, rng)
                          : base;
    if (rec.label < 0 || rec.label >= opts_.num_classes)
      throw std::out_of_range("batch_iter: label " +
                              std::to_string(rec.label) +
                              " outside [0, " +
                              std::to_string(opts_.num_classes) + ")");
    float* img = out.images.data() + i * kImageBytes;
    for (int c = 0; c < kImageChannels; ++c)
      for (int p = 0; p < kImagePixels; ++p)
        img[c * kImagePixels + p] =
            (rec.pixel_unit(c * kImagePixels + p) - mean[c]) * inv_std[c];
    out.soft_targets[i * opts_.num_classes + rec.label] = 1.0f;
    out.hard_labels[i] = rec.label;
  }

  if (opts_.train_mode) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const double u = coin(rng);
    if (u < opts_.mixup_prob)
      mixup(out, opts_.mixup_alpha, rng);
    else if (u < opts_.mixup_prob + opts_.cutmix_prob)
      cutmix(out, opts_.cutmix_alpha, rng);
  }

  cursor_ += take;
  ++batch_index_;
  return true;
}

}  // namespace vitrm
