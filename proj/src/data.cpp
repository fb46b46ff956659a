#include "moex/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace moex {

void ImageDataset::push_back(std::span<const std::uint8_t> img, int label) {
  if (static_cast<Index>(img.size()) != kImageBytes) throw std::invalid_argument("ImageDataset: image must be 3x32x32");
  if (label < 0 || label >= classes) throw std::out_of_range("ImageDataset: label out of range");
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(label);
}

ImageDataset ImageDataset::subset(std::span<const Index> indices) const {
  ImageDataset out;
  out.classes = classes;
  out.pixels.reserve(indices.size() * static_cast<std::size_t>(kImageBytes));
  for (Index i : indices) out.push_back(image(i), labels[static_cast<std::size_t>(i)]);
  return out;
}

ChannelStats compute_channel_stats(const ImageDataset& data) {
  ChannelStats st;
  if (data.size() == 0) return st;
  const Index plane = kImageSide * kImageSide;
  const double count = double(data.size()) * double(plane);
  for (Index c = 0; c < kImageChannels; ++c) {
    double s = 0;
    for (Index n = 0; n < data.size(); ++n) {
      const auto img = data.image(n);
      for (Index i = 0; i < plane; ++i) s += img[c * plane + i];
    }
    const double m = s / count;
    double ss = 0;
    for (Index n = 0; n < data.size(); ++n) {
      const auto img = data.image(n);
      for (Index i = 0; i < plane; ++i) ss += (img[c * plane + i] - m) * (img[c * plane + i] - m);
    }
    st.mean[static_cast<std::size_t>(c)] = m;
    st.std[static_cast<std::size_t>(c)] = ss > 0 ? std::sqrt(ss / count) : 1.0;
  }
  return st;
}

ImageDataset load_cifar10_binary(std::span<const std::filesystem::path> paths, int classes) {
  ImageDataset out;
  out.classes = classes;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % static_cast<std::size_t>(kRecordBytes) != 0) {
      std::ostringstream os;
      os << path.string() << ": length " << bytes.size() << " is not a multiple of " << kRecordBytes
         << " (truncated record " << bytes.size() / kRecordBytes << ")";
      throw std::runtime_error(os.str());
    }
    const std::size_t records = bytes.size() / static_cast<std::size_t>(kRecordBytes);
    for (std::size_t r = 0; r < records; ++r) {
      const std::uint8_t* rec = bytes.data() + r * static_cast<std::size_t>(kRecordBytes);
      if (rec[0] >= classes) {
        std::ostringstream os;
        os << path.string() << ": record " << r << " has label " << int(rec[0]) << " outside [0," << classes << ")";
        throw std::runtime_error(os.str());
      }
      out.push_back({rec + 1, static_cast<std::size_t>(kImageBytes)}, rec[0]);
    }
  }
  return out;
}

void write_cifar10_binary(const ImageDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (Index i = 0; i < data.size(); ++i) {
    const char label = static_cast<char>(data.labels[static_cast<std::size_t>(i)]);
    out.put(label);
    out.write(reinterpret_cast<const char*>(data.image(i).data()), kImageBytes);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

CifarSplits load_cifar10_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> train;
  for (int i = 1; i <= 5; ++i) train.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  std::vector<std::filesystem::path> test{dir / "test_batch.bin"};
  for (const auto& p : train)
    if (!std::filesystem::exists(p)) throw std::runtime_error("missing CIFAR-10 file " + p.string());
  if (!std::filesystem::exists(test[0])) throw std::runtime_error("missing CIFAR-10 file " + test[0].string());
  return {load_cifar10_binary(train), load_cifar10_binary(test)};
}

ImageDataset seeded_subset(const ImageDataset& data, Index count, std::uint64_t seed) {
  if (count >= data.size()) return data;
  std::vector<Index> idx(static_cast<std::size_t>(data.size()));
  std::iota(idx.begin(), idx.end(), Index(0));
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return data.subset(idx);
}

SynthDataset synth_moment_dataset(const SynthConfig& cfg) {
  if (cfg.classes < 2 || cfg.classes > 16) throw std::invalid_argument("synth_moment_dataset: K must lie in [2,16]");
  const Index side = kImageSide, plane = side * side;
  SynthDataset out;
  out.data.classes = cfg.classes;

  // Class k's template is 128 + amplitude P_k, where P_k is a random sum of
  // low-frequency cosines with zero mean and unit peak.
  std::seed_seq template_seq{cfg.seed, std::uint64_t(0x7e3a)};
  std::mt19937_64 trng(template_seq);
  std::uniform_real_distribution<double> coef(-1.0, 1.0), phase(0.0, 2 * std::numbers::pi);
  for (int k = 0; k < cfg.classes; ++k) {
    std::vector<double> pattern(static_cast<std::size_t>(plane), 0.0);
    for (int fy = 0; fy <= 2; ++fy) {
      for (int fx = 0; fx <= 2; ++fx) {
        if (fy == 0 && fx == 0) continue;
        const double a = coef(trng), ph = phase(trng);
        for (Index y = 0; y < side; ++y)
          for (Index x = 0; x < side; ++x)
            pattern[static_cast<std::size_t>(y * side + x)] +=
                a * std::cos(2 * std::numbers::pi * (fy * double(y) + fx * double(x)) / double(side) + ph);
      }
    }
    double peak = 1e-12;
    for (double v : pattern) peak = std::max(peak, std::abs(v));
    for (double& v : pattern) v = 128.0 + cfg.amplitude * v / peak;
    out.templates.push_back(std::move(pattern));
  }
  double min_rms = std::numeric_limits<double>::infinity();
  for (int a = 0; a < cfg.classes; ++a)
    for (int b = a + 1; b < cfg.classes; ++b) {
      double ss = 0;
      for (Index i = 0; i < plane; ++i) {
        const double d = out.templates[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] -
                         out.templates[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
        ss += d * d;
      }
      min_rms = std::min(min_rms, std::sqrt(ss / double(plane)));
    }
  out.template_margin = 0.5 * min_rms;

  std::seed_seq noise_seq{cfg.seed, std::uint64_t(0x5eed), std::uint64_t(cfg.split)};
  std::mt19937_64 nrng(noise_seq);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::uint8_t> img(static_cast<std::size_t>(kImageBytes));
  // Interleave classes so any prefix is roughly balanced.
  for (Index i = 0; i < cfg.n_per_class; ++i) {
    for (int k = 0; k < cfg.classes; ++k) {
      const auto& t = out.templates[static_cast<std::size_t>(k)];
      for (Index c = 0; c < kImageChannels; ++c)
        for (Index p = 0; p < plane; ++p) {
          const double v = t[static_cast<std::size_t>(p)] + (cfg.noise > 0 ? cfg.noise * noise(nrng) : 0.0);
          img[static_cast<std::size_t>(c * plane + p)] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      out.data.push_back(img, k);
    }
  }
  return out;
}

std::vector<Index> epoch_order(Index n, bool shuffle, std::uint64_t seed, int epoch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  if (shuffle) {
    std::seed_seq seq{seed, std::uint64_t(0xba7c), static_cast<std::uint64_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

std::vector<std::span<const Index>> split_batches(std::span<const Index> order, Index batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::span<const Index>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    out.push_back(order.subspan(start, std::min(order.size() - start, static_cast<std::size_t>(batch_size))));
  }
  return out;
}

}  // namespace moex
