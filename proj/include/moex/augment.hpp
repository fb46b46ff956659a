#pragma once

// Pixel-space augmentations: random translation and flip, Cutout, Mixup and
// CutMix. Images are C×H×W planes of any pixel type.

#include "moex/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace moex {

template <typename T>
struct Image {
  Index channels = 0, height = 0, width = 0;
  std::vector<T> px;

  Image() = default;
  Image(Index c, Index h, Index w, T fill = T(0))
      : channels(c), height(h), width(w), px(static_cast<std::size_t>(c * h * w), fill) {}

  T& at(Index c, Index y, Index x) { return px[static_cast<std::size_t>((c * height + y) * width + x)]; }
  T at(Index c, Index y, Index x) const { return px[static_cast<std::size_t>((c * height + y) * width + x)]; }
  bool same_shape(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
  bool operator==(const Image&) const = default;
};

struct CropOffset {
  Index dy = 0, dx = 0;
};

inline CropOffset draw_crop_offset(std::mt19937_64& rng, Index pad) {
  std::uniform_int_distribution<Index> u(0, 2 * pad);
  const Index dy = u(rng);
  return {dy, u(rng)};
}

/// Zero-pad by `pad` on every side, then take the window at (dy, dx) of the original size.
template <typename T>
Image<T> pad_crop_at(const Image<T>& img, Index pad, CropOffset off) {
  if (pad < 0) throw std::invalid_argument("pad_crop: pad must be >= 0");
  if (off.dy < 0 || off.dy > 2 * pad || off.dx < 0 || off.dx > 2 * pad)
    throw std::out_of_range("pad_crop: offset outside the padded frame");
  Image<T> out(img.channels, img.height, img.width);
  for (Index c = 0; c < img.channels; ++c)
    for (Index y = 0; y < img.height; ++y) {
      const Index sy = y + off.dy - pad;
      if (sy < 0 || sy >= img.height) continue;
      for (Index x = 0; x < img.width; ++x) {
        const Index sx = x + off.dx - pad;
        if (sx >= 0 && sx < img.width) out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  return out;
}

template <typename T>
Image<T> pad_crop(const Image<T>& img, Index pad, std::mt19937_64& rng) {
  if (pad < 0) throw std::invalid_argument("pad_crop: pad must be >= 0");
  return pad_crop_at(img, pad, draw_crop_offset(rng, pad));
}

template <typename T>
Image<T> flip_horizontal(const Image<T>& img) {
  Image<T> out(img.channels, img.height, img.width);
  for (Index c = 0; c < img.channels; ++c)
    for (Index y = 0; y < img.height; ++y)
      for (Index x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

template <typename T>
Image<T> hflip(const Image<T>& img, double p, std::mt19937_64& rng) {
  return std::bernoulli_distribution(p)(rng) ? flip_horizontal(img) : img;
}

/// Half-open pixel rectangle [y0,y1) × [x0,x1).
struct Box {
  Index y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  Index area() const { return std::max<Index>(0, y1 - y0) * std::max<Index>(0, x1 - x0); }
};

/// Square of side `size` centred at (cy, cx), clipped to the image.
inline Box centered_box(Index cy, Index cx, Index size_h, Index size_w, Index height, Index width) {
  return {std::clamp<Index>(cy - size_h / 2, 0, height), std::clamp<Index>(cy - size_h / 2 + size_h, 0, height),
          std::clamp<Index>(cx - size_w / 2, 0, width), std::clamp<Index>(cx - size_w / 2 + size_w, 0, width)};
}

template <typename T>
void fill_box(Image<T>& img, const Box& b, T value) {
  for (Index c = 0; c < img.channels; ++c)
    for (Index y = b.y0; y < b.y1; ++y)
      for (Index x = b.x0; x < b.x1; ++x) img.at(c, y, x) = value;
}

template <typename T>
Image<T> cutout_at(const Image<T>& img, Index size, Index cy, Index cx) {
  Image<T> out = img;
  fill_box(out, centered_box(cy, cx, size, size, img.height, img.width), T(0));
  return out;
}

/// Zeroes a size×size square with a uniformly drawn centre (clipped at borders).
template <typename T>
Image<T> cutout(const Image<T>& img, Index size, std::mt19937_64& rng) {
  if (size < 0 || size > std::min(img.height, img.width))
    throw std::invalid_argument("cutout: size must lie in [0, min(H,W)]");
  std::uniform_int_distribution<Index> uy(0, img.height - 1), ux(0, img.width - 1);
  const Index cy = uy(rng);
  return cutout_at(img, size, cy, ux(rng));
}

/// A (possibly label-mixed) training example. Labels are probability rows.
struct AugmentedExample {
  Image<double> image;
  std::vector<double> y_a, y_b;
  double lambda_pixel = 1.0;
};

template <typename T>
AugmentedExample mixup(const Image<T>& xa, const Image<T>& xb, const std::vector<double>& ya,
                       const std::vector<double>& yb, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("mixup: lambda must lie in [0,1]");
  if (!xa.same_shape(xb)) throw std::invalid_argument("mixup: image shapes differ");
  AugmentedExample out{Image<double>(xa.channels, xa.height, xa.width), ya, yb, lambda};
  for (std::size_t i = 0; i < xa.px.size(); ++i) out.image.px[i] = lambda * double(xa.px[i]) + (1.0 - lambda) * double(xb.px[i]);
  return out;
}

/// Box for CutMix: sides H·sqrt(1-l0), W·sqrt(1-l0) with l0 ~ U[0,1], uniform centre, clipped.
inline Box draw_cutmix_box(std::mt19937_64& rng, Index height, Index width) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cut = std::sqrt(1.0 - u(rng));
  const Index ch = static_cast<Index>(double(height) * cut), cw = static_cast<Index>(double(width) * cut);
  std::uniform_int_distribution<Index> uy(0, height - 1), ux(0, width - 1);
  const Index cy = uy(rng);
  const Index cx = ux(rng);
  return centered_box(cy, cx, ch, cw, height, width);
}

/// Pastes xb's pixels inside `box` into xa; lambda_pixel is the fraction of xa kept.
template <typename T>
AugmentedExample cutmix_at(const Image<T>& xa, const Image<T>& xb, const std::vector<double>& ya,
                           const std::vector<double>& yb, const Box& box) {
  if (!xa.same_shape(xb)) throw std::invalid_argument("cutmix: image shapes differ");
  AugmentedExample out{Image<double>(xa.channels, xa.height, xa.width), ya, yb, 1.0};
  for (std::size_t i = 0; i < xa.px.size(); ++i) out.image.px[i] = double(xa.px[i]);
  for (Index c = 0; c < xa.channels; ++c)
    for (Index y = box.y0; y < box.y1; ++y)
      for (Index x = box.x0; x < box.x1; ++x) out.image.at(c, y, x) = double(xb.at(c, y, x));
  out.lambda_pixel = 1.0 - double(box.area()) / double(xa.height * xa.width);
  return out;
}

template <typename T>
AugmentedExample cutmix(const Image<T>& xa, const Image<T>& xb, const std::vector<double>& ya,
                        const std::vector<double>& yb, std::mt19937_64& rng) {
  return cutmix_at(xa, xb, ya, yb, draw_cutmix_box(rng, xa.height, xa.width));
}

}  // namespace moex
