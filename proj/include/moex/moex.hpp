#pragma once

// Moment exchange: re-synthesize each instance's normalized features with the
// moments of a partner drawn by a batch permutation, and interpolate the
// two labels with weight lambda.

#include "moex/autodiff.hpp"
#include "moex/normalization.hpp"

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace moex {

using Rng = std::mt19937_64;

enum class ExchangeMode { Both, MeanOnly, StdOnly };

/// Where in the residual network the exchange is applied.
enum class InsertionPoint { AfterFirstBlock, BeforeStage2, BeforeStage3 };

std::string to_string(ExchangeMode m);
std::string to_string(InsertionPoint p);
ExchangeMode parse_exchange_mode(std::string_view s);      // both | mean | std
InsertionPoint parse_insertion_point(std::string_view s);  // stem | stage2 | stage3

struct MoExConfig {
  NormScheme scheme = NormScheme::pono();
  InsertionPoint insertion = InsertionPoint::AfterFirstBlock;
  double p = 0.5;
  double lambda = 0.9;
  ExchangeMode mode = ExchangeMode::Both;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct ExchangeRecord {
  std::vector<Index> perm;
  bool applied = false;
  double lambda = 1.0;
};

/// Uniform random permutation of {0..n-1} (Fisher-Yates).
std::vector<Index> sample_permutation(Rng& rng, Index n);

/// Draws the batch permutation, then the Bernoulli(p) gate, from rng.
ExchangeRecord draw_exchange(Rng& rng, Index n, double p, double lambda);

/// Donor index for instance i: the permuted partner when applied, i otherwise.
inline Index donor(const ExchangeRecord& r, Index i) { return r.applied ? r.perm[static_cast<std::size_t>(i)] : i; }

namespace detail {
inline void check_perm(std::span<const Index> perm, Index n) {
  if (static_cast<Index>(perm.size()) != n) {
    throw std::invalid_argument("exchange: permutation length " + std::to_string(perm.size()) +
                                " does not match batch size " + std::to_string(n));
  }
  std::vector<bool> hit(static_cast<std::size_t>(n), false);
  for (Index v : perm) {
    if (v < 0 || v >= n || hit[static_cast<std::size_t>(v)]) throw std::invalid_argument("exchange: not a permutation");
    hit[static_cast<std::size_t>(v)] = true;
  }
}

template <typename Scalar>
Tensor4<Scalar> gather_batch(const Tensor4<Scalar>& m, std::span<const Index> perm) {
  Tensor4<Scalar> out(m.shape());
  const Index inst = m.shape().instance();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.array().segment(static_cast<Index>(i) * inst, inst) = m.array().segment(perm[i] * inst, inst);
  }
  return out;
}
}  // namespace detail

/// Instance i keeps its normalized features and takes moments from perm[i].
template <typename Scalar>
Tensor4<Scalar> exchange_batch(const Tensor4<Scalar>& h, std::span<const Index> perm, const NormScheme& scheme,
                               ExchangeMode mode = ExchangeMode::Both) {
  detail::check_perm(perm, h.shape().n);
  auto a = analyze(h, scheme);
  MomentPair<Scalar> donor = a.moments;
  if (mode != ExchangeMode::StdOnly) donor.mean = detail::gather_batch(a.moments.mean, perm);
  if (mode != ExchangeMode::MeanOnly) donor.std = detail::gather_batch(a.moments.std, perm);
  return synthesize(a.normalized, donor);
}

/// In-graph exchange; gradients reach both the receiving and the donor instance.
template <typename Scalar>
Var<Scalar> exchange_batch(const Var<Scalar>& h, std::span<const Index> perm, const NormScheme& scheme,
                           ExchangeMode mode = ExchangeMode::Both) {
  detail::check_perm(perm, h.shape().n);
  auto a = analyze(h, scheme);
  Var<Scalar> mean = a.mean, std = a.std;
  if (mode != ExchangeMode::StdOnly && mean.defined()) mean = batch_gather(mean, perm);
  if (mode != ExchangeMode::MeanOnly) std = batch_gather(std, perm);
  return synthesize(a.hhat, mean, std, scheme);
}

inline void check_lambda(double lambda, const char* what) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument(std::string(what) + ": lambda must lie in [0,1], got " + std::to_string(lambda));
  }
}

/// lambda * CE(logits, y_a) + (1 - lambda) * CE(logits, y_b), as two separate terms.
template <typename Scalar>
Var<Scalar> interpolated_loss(const Var<Scalar>& logits, const Tensor4<Scalar>& y_a, const Tensor4<Scalar>& y_b,
                              double lambda) {
  check_lambda(lambda, "interpolated_loss");
  return add(scale(softmax_cross_entropy(logits, y_a), Scalar(lambda)),
             scale(softmax_cross_entropy(logits, y_b), Scalar(1.0 - lambda)));
}

/// The same loss as cross entropy against the single target row lambda*y_a + (1-lambda)*y_b.
template <typename Scalar>
Var<Scalar> interpolated_loss_mixed(const Var<Scalar>& logits, const Tensor4<Scalar>& y_a,
                                    const Tensor4<Scalar>& y_b, double lambda) {
  check_lambda(lambda, "interpolated_loss");
  require_shape(y_a.shape() == y_b.shape(), "interpolated_loss", y_a.shape(), y_b.shape());
  Tensor4<Scalar> t(y_a.shape());
  t.array() = Scalar(lambda) * y_a.array() + Scalar(1.0 - lambda) * y_b.array();
  return softmax_cross_entropy(logits, t);
}

/// Target rows with mass lambda on the label and (1-lambda)/(K-1) on every other class.
template <typename Scalar>
Tensor4<Scalar> smoothed_targets(std::span<const int> labels, Index classes, double lambda) {
  check_lambda(lambda, "label_smooth_loss");
  if (classes < 2) throw std::invalid_argument("label_smooth_loss: need K >= 2 classes");
  const Index n = static_cast<Index>(labels.size());
  Tensor4<Scalar> t(Shape4{n, classes, 1, 1}, Scalar((1.0 - lambda) / double(classes - 1)));
  for (Index i = 0; i < n; ++i) t(i, labels[static_cast<std::size_t>(i)], 0, 0) = Scalar(lambda);
  return t;
}

template <typename Scalar>
Var<Scalar> label_smooth_loss(const Var<Scalar>& logits, std::span<const int> labels, double lambda, Index classes) {
  return softmax_cross_entropy(logits, smoothed_targets<Scalar>(labels, classes, lambda));
}

template <typename Scalar>
Tensor4<Scalar> one_hot(std::span<const int> labels, Index classes) {
  const Index n = static_cast<Index>(labels.size());
  Tensor4<Scalar> t(n, classes, 1, 1);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes) throw std::out_of_range("one_hot: label " + std::to_string(y) + " out of range");
    t(i, y, 0, 0) = Scalar(1);
  }
  return t;
}

}  // namespace moex
