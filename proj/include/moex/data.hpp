#pragma once

#include "moex/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace moex {

inline constexpr Index kImageChannels = 3;
inline constexpr Index kImageSide = 32;
inline constexpr Index kImageBytes = kImageChannels * kImageSide * kImageSide;  // 3072
inline constexpr Index kRecordBytes = kImageBytes + 1;                          // 3073

/// 3×32×32 u8 images (channel-major planes) with integer labels.
struct ImageDataset {
  std::vector<std::uint8_t> pixels;  // size() * kImageBytes
  std::vector<int> labels;
  int classes = 10;

  Index size() const { return static_cast<Index>(labels.size()); }
  std::span<const std::uint8_t> image(Index i) const {
    return {pixels.data() + i * kImageBytes, static_cast<std::size_t>(kImageBytes)};
  }
  void push_back(std::span<const std::uint8_t> img, int label);
  /// Keeps the listed indices, in order.
  ImageDataset subset(std::span<const Index> indices) const;
  bool operator==(const ImageDataset&) const = default;
};

/// Per-channel standardization constants (pixel units, 0..255).
struct ChannelStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> std{1, 1, 1};
};

ChannelStats compute_channel_stats(const ImageDataset& data);

/// Reads CIFAR-10 binary batches: records of [label byte][3072 pixel bytes].
ImageDataset load_cifar10_binary(std::span<const std::filesystem::path> paths, int classes = 10);
void write_cifar10_binary(const ImageDataset& data, const std::filesystem::path& path);

/// data_batch_{1..5}.bin and test_batch.bin under dir.
struct CifarSplits {
  ImageDataset train, test;
};
CifarSplits load_cifar10_dir(const std::filesystem::path& dir);

/// Deterministic subset of `count` images drawn without replacement.
ImageDataset seeded_subset(const ImageDataset& data, Index count, std::uint64_t seed);

struct SynthConfig {
  std::uint64_t seed = 0;
  Index n_per_class = 200;
  int classes = 10;
  double noise = 24.0;  // per-channel Gaussian noise sd, pixel units
  double amplitude = 50.0;  // peak deviation of a template from mid-gray
  int split = 0;  // 0 train, 1 test: same templates, independent noise
};

struct SynthDataset {
  ImageDataset data;
  std::vector<std::vector<double>> templates;  // per class, 32x32 brightness
  double template_margin = 0;  // half the smallest RMS distance between two templates
};

/// Class-specific low-frequency brightness templates, equal across channels,
/// plus i.i.d. per-channel noise. The label lives in the per-position channel mean.
SynthDataset synth_moment_dataset(const SynthConfig& cfg);

/// A mini-batch in network layout.
template <typename Scalar>
struct Batch {
  Tensor4<Scalar> x;       // (B,3,32,32), standardized
  std::vector<int> labels;
  std::vector<Index> indices;  // positions in the source dataset
};

/// Epoch order: identity when shuffle is false, otherwise a seeded shuffle.
std::vector<Index> epoch_order(Index n, bool shuffle, std::uint64_t seed, int epoch);

/// Batch boundaries over an order; the final partial batch is kept.
std::vector<std::span<const Index>> split_batches(std::span<const Index> order, Index batch_size);

/// u8 -> standardized real for one image.
template <typename Scalar>
void standardize_into(std::span<const std::uint8_t> img, const ChannelStats& stats, Scalar* out) {
  const Index plane = kImageSide * kImageSide;
  for (Index c = 0; c < kImageChannels; ++c) {
    const double m = stats.mean[static_cast<std::size_t>(c)], s = stats.std[static_cast<std::size_t>(c)];
    for (Index i = 0; i < plane; ++i) out[c * plane + i] = Scalar((double(img[c * plane + i]) - m) / s);
  }
}

template <typename Scalar>
Batch<Scalar> assemble_batch(const ImageDataset& data, std::span<const Index> indices, const ChannelStats& stats) {
  Batch<Scalar> b{Tensor4<Scalar>(static_cast<Index>(indices.size()), kImageChannels, kImageSide, kImageSide), {}, {}};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    standardize_into(data.image(indices[i]), stats, b.x.data() + static_cast<Index>(i) * kImageBytes);
    b.labels.push_back(data.labels[static_cast<std::size_t>(indices[i])]);
    b.indices.push_back(indices[i]);
  }
  return b;
}

/// All batches of one epoch.
template <typename Scalar>
std::vector<Batch<Scalar>> batches(const ImageDataset& data, Index batch_size, std::uint64_t shuffle_seed, int epoch,
                                   const ChannelStats& stats, bool shuffle = true) {
  const auto order = epoch_order(data.size(), shuffle, shuffle_seed, epoch);
  std::vector<Batch<Scalar>> out;
  for (auto idx : split_batches(order, batch_size)) out.push_back(assemble_batch<Scalar>(data, idx, stats));
  return out;
}

}  // namespace moex
