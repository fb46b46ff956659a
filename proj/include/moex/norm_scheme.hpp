#pragma once

#include "moex/tensor.hpp"

#include <string>
#include <string_view>

namespace moex {

enum class NormKind { PONO, IN, LN, GN, UN2 };

/// Intra-instance normalization scheme: which axes a moment is taken over, plus ε.
struct NormScheme {
  NormKind kind = NormKind::PONO;
  Index groups = 4;  // GN only
  double eps = 1e-5;

  static NormScheme pono(double eps = 1e-5) { return {NormKind::PONO, 1, eps}; }
  static NormScheme instance(double eps = 1e-5) { return {NormKind::IN, 1, eps}; }
  static NormScheme layer(double eps = 1e-5) { return {NormKind::LN, 1, eps}; }
  static NormScheme group(Index g, double eps = 1e-5) { return {NormKind::GN, g, eps}; }
  static NormScheme un2(double eps = 1e-5) { return {NormKind::UN2, 1, eps}; }

  /// Whether the first moment is subtracted (false only for UN2).
  bool centered() const { return kind != NormKind::UN2; }

  friend bool operator==(const NormScheme&, const NormScheme&) = default;
};

std::string to_string(const NormScheme& s);
/// Parses "pono", "in", "ln", "gn<g>" (e.g. "gn4") and "un2".
NormScheme parse_norm_scheme(std::string_view name, double eps = 1e-5);

/// Maps every element of an (N,C,H,W) tensor to the moment slice it belongs to.
class SliceLayout {
 public:
  SliceLayout(const NormScheme& scheme, const Shape4& x) : kind_(scheme.kind), x_(x) {
    if (x.c < 1) throw ShapeError("normalization: channel count must be >= 1, got " + x.str());
    switch (kind_) {
      case NormKind::PONO:
      case NormKind::UN2:
        m_ = {x.n, 1, x.h, x.w};
        break;
      case NormKind::IN:
        m_ = {x.n, x.c, 1, 1};
        break;
      case NormKind::LN:
        m_ = {x.n, 1, 1, 1};
        break;
      case NormKind::GN:
        if (scheme.groups < 1 || x.c % scheme.groups != 0) {
          throw std::invalid_argument("normalization: GN group count " + std::to_string(scheme.groups) +
                                      " does not divide C=" + std::to_string(x.c));
        }
        m_ = {x.n, scheme.groups, 1, 1};
        group_width_ = x.c / scheme.groups;
        break;
    }
  }

  const Shape4& input_shape() const { return x_; }
  const Shape4& moment_shape() const { return m_; }
  Index slice_size() const { return x_.size() / m_.size(); }

  Index slice_of(Index n, Index c, Index h, Index w) const {
    switch (kind_) {
      case NormKind::PONO:
      case NormKind::UN2:
        return (n * x_.h + h) * x_.w + w;
      case NormKind::IN:
        return n * x_.c + c;
      case NormKind::LN:
        return n;
      case NormKind::GN:
        return n * m_.c + c / group_width_;
    }
    return 0;
  }

  /// Calls f(flat_index, slice_index) for every element in storage order.
  template <typename F>
  void for_each(F&& f) const {
    Index i = 0;
    for (Index n = 0; n < x_.n; ++n)
      for (Index c = 0; c < x_.c; ++c)
        for (Index h = 0; h < x_.h; ++h)
          for (Index w = 0; w < x_.w; ++w, ++i) f(i, slice_of(n, c, h, w));
  }

 private:
  NormKind kind_;
  Shape4 x_;
  Shape4 m_{};
  Index group_width_ = 1;
};

}  // namespace moex
