#pragma once

// Invertible intra-instance normalization: analyze splits a feature map into
// normalized content and per-slice moments, synthesize puts them back.

#include "moex/autodiff.hpp"
#include "moex/norm_scheme.hpp"
#include "moex/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace moex {

template <typename Scalar>
struct MomentPair {
  Tensor4<Scalar> mean;  // zeros for UN2
  Tensor4<Scalar> std;
  NormScheme scheme;
};

template <typename Scalar>
struct NormalizedFeatures {
  Tensor4<Scalar> hhat;
  NormScheme scheme;
};

template <typename Scalar>
struct Analysis {
  NormalizedFeatures<Scalar> normalized;
  MomentPair<Scalar> moments;
};

/// Population moments over each slice; sigma = sqrt(var + eps).
template <typename Scalar>
Analysis<Scalar> analyze(const Tensor4<Scalar>& h, const NormScheme& scheme) {
  const SliceLayout layout(scheme, h.shape());
  const Shape4 ms = layout.moment_shape();
  const Scalar inv = Scalar(1) / Scalar(layout.slice_size());
  Tensor4<Scalar> mean(ms), sq(ms);
  if (scheme.centered()) {
    layout.for_each([&](Index i, Index m) { mean[m] += h[i]; });
    mean.array() *= inv;
  }
  layout.for_each([&](Index i, Index m) {
    const Scalar d = h[i] - mean[m];
    sq[m] += d * d;
  });
  Tensor4<Scalar> sigma(ms);
  sigma.array() = (sq.array() * inv + Scalar(scheme.eps)).sqrt();
  Tensor4<Scalar> hhat(h.shape());
  layout.for_each([&](Index i, Index m) { hhat[i] = (h[i] - mean[m]) / sigma[m]; });
  return {{std::move(hhat), scheme}, {std::move(mean), std::move(sigma), scheme}};
}

/// Inverse of analyze: sigma * hhat + mu, broadcast over each slice.
template <typename Scalar>
Tensor4<Scalar> synthesize(const NormalizedFeatures<Scalar>& normalized, const MomentPair<Scalar>& moments) {
  if (!(normalized.scheme == moments.scheme)) {
    throw std::invalid_argument("synthesize: normalized features were produced by " + to_string(normalized.scheme) +
                                " but moments are tagged " + to_string(moments.scheme));
  }
  const SliceLayout layout(moments.scheme, normalized.hhat.shape());
  require_shape(layout.moment_shape() == moments.mean.shape() && moments.mean.shape() == moments.std.shape(),
                "synthesize", layout.moment_shape(), moments.std.shape());
  if ((moments.std.array() <= Scalar(0)).any()) throw std::invalid_argument("synthesize: sigma must be positive");
  Tensor4<Scalar> out(normalized.hhat.shape());
  layout.for_each([&](Index i, Index m) { out[i] = moments.std[m] * normalized.hhat[i] + moments.mean[m]; });
  return out;
}

/// PONO mean and std stacked as a two-channel (N,2,H,W) map.
template <typename Scalar>
Tensor4<Scalar> moment_feature_map(const Tensor4<Scalar>& h, double eps = 1e-5) {
  const auto a = analyze(h, NormScheme::pono(eps));
  const Shape4 s = h.shape();
  Tensor4<Scalar> out(s.n, 2, s.h, s.w);
  const Index p = s.plane();
  for (Index n = 0; n < s.n; ++n) {
    out.array().segment(n * 2 * p, p) = a.moments.mean.array().segment(n * p, p);
    out.array().segment(n * 2 * p + p, p) = a.moments.std.array().segment(n * p, p);
  }
  return out;
}

/// 8-bit grayscale rendering of one moment map. lo/hi are the values mapped to 0 and 255.
struct GrayImage {
  Index height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
  double lo = 0, hi = 0;
};

/// Min-max scales one H×W map to [0,255]; a constant map renders as 128.
template <typename Scalar>
GrayImage render_gray(const Scalar* values, Index height, Index width) {
  GrayImage img{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width)), 0, 0};
  if (height * width == 0) return img;
  double lo = values[0], hi = values[0];
  for (Index i = 1; i < height * width; ++i) {
    lo = std::min(lo, double(values[i]));
    hi = std::max(hi, double(values[i]));
  }
  img.lo = lo;
  img.hi = hi;
  for (Index i = 0; i < height * width; ++i) {
    img.pixels[i] =
        hi > lo ? static_cast<std::uint8_t>(std::lround(255.0 * (double(values[i]) - lo) / (hi - lo))) : 128;
  }
  return img;
}

/// PONO mean and std maps of a single instance (N must be 1), as grayscale images.
template <typename Scalar>
std::pair<GrayImage, GrayImage> moment_images(const Tensor4<Scalar>& h, double eps = 1e-5) {
  if (h.shape().n != 1) throw ShapeError("moment_images: expected a single instance, got " + h.shape().str());
  const auto a = analyze(h, NormScheme::pono(eps));
  return {render_gray(a.moments.mean.data(), h.shape().h, h.shape().w),
          render_gray(a.moments.std.data(), h.shape().h, h.shape().w)};
}

// ---------------------------------------------------------------------------
// Differentiable counterparts used inside the network

template <typename Scalar>
struct AnalysisVar {
  Var<Scalar> hhat;
  Var<Scalar> mean;  // undefined for UN2
  Var<Scalar> std;
};

template <typename Scalar>
AnalysisVar<Scalar> analyze(const Var<Scalar>& h, const NormScheme& scheme) {
  const Shape4 s = h.shape();
  AnalysisVar<Scalar> out;
  Var<Scalar> centered = h;
  if (scheme.centered()) {
    out.mean = slice_mean(h, scheme);
    centered = sub(h, slice_broadcast(out.mean, scheme, s));
  }
  out.std = sqrt(add_scalar(slice_mean(mul(centered, centered), scheme), Scalar(scheme.eps)));
  out.hhat = div(centered, slice_broadcast(out.std, scheme, s));
  return out;
}

template <typename Scalar>
Var<Scalar> synthesize(const Var<Scalar>& hhat, const Var<Scalar>& mean, const Var<Scalar>& std,
                       const NormScheme& scheme) {
  const Shape4 s = hhat.shape();
  Var<Scalar> out = mul(hhat, slice_broadcast(std, scheme, s));
  if (mean.defined()) out = add(out, slice_broadcast(mean, scheme, s));
  return out;
}

template <typename Scalar>
Var<Scalar> moment_feature_map(const Var<Scalar>& h, double eps = 1e-5) {
  const auto a = analyze(h, NormScheme::pono(eps));
  return concat_channels(a.mean, a.std);
}

}  // namespace moex
