#include "moex/moex.hpp"

#include <charconv>
#include <iostream>
#include <numeric>

namespace moex {

void log_warning(const std::string& message) { std::clog << "[warn] " << message << '\n'; }

std::string to_string(const NormScheme& s) {
  switch (s.kind) {
    case NormKind::PONO:
      return "pono";
    case NormKind::IN:
      return "in";
    case NormKind::LN:
      return "ln";
    case NormKind::GN:
      return "gn" + std::to_string(s.groups);
    case NormKind::UN2:
      return "un2";
  }
  return "?";
}

NormScheme parse_norm_scheme(std::string_view name, double eps) {
  if (name == "pono") return NormScheme::pono(eps);
  if (name == "in") return NormScheme::instance(eps);
  if (name == "ln") return NormScheme::layer(eps);
  if (name == "un2") return NormScheme::un2(eps);
  if (name.starts_with("gn") && name.size() > 2) {
    Index g = 0;
    auto [ptr, ec] = std::from_chars(name.data() + 2, name.data() + name.size(), g);
    if (ec == std::errc() && ptr == name.data() + name.size() && g >= 1) return NormScheme::group(g, eps);
  }
  throw std::invalid_argument("unknown normalization scheme '" + std::string(name) + "'");
}

std::string to_string(ExchangeMode m) {
  switch (m) {
    case ExchangeMode::Both:
      return "both";
    case ExchangeMode::MeanOnly:
      return "mean";
    case ExchangeMode::StdOnly:
      return "std";
  }
  return "?";
}

std::string to_string(InsertionPoint p) {
  switch (p) {
    case InsertionPoint::AfterFirstBlock:
      return "stem";
    case InsertionPoint::BeforeStage2:
      return "stage2";
    case InsertionPoint::BeforeStage3:
      return "stage3";
  }
  return "?";
}

ExchangeMode parse_exchange_mode(std::string_view s) {
  if (s == "both") return ExchangeMode::Both;
  if (s == "mean") return ExchangeMode::MeanOnly;
  if (s == "std") return ExchangeMode::StdOnly;
  throw std::invalid_argument("unknown exchange mode '" + std::string(s) + "'");
}

InsertionPoint parse_insertion_point(std::string_view s) {
  if (s == "stem") return InsertionPoint::AfterFirstBlock;
  if (s == "stage2") return InsertionPoint::BeforeStage2;
  if (s == "stage3") return InsertionPoint::BeforeStage3;
  throw std::invalid_argument("unknown insertion point '" + std::string(s) + "'");
}

void MoExConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("moex: p must lie in [0,1], got " + std::to_string(p));
  check_lambda(lambda, "moex");
  if (!(scheme.eps > 0.0)) throw std::invalid_argument("moex: epsilon must be positive");
  if (scheme.kind == NormKind::GN && scheme.groups < 1) throw std::invalid_argument("moex: GN needs >= 1 group");
}

std::vector<Index> sample_permutation(Rng& rng, Index n) {
  if (n < 1) throw std::invalid_argument("sample_permutation: n must be >= 1");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index(0));
  for (Index i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<Index> pick(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  return perm;
}

ExchangeRecord draw_exchange(Rng& rng, Index n, double p, double lambda) {
  ExchangeRecord r;
  r.perm = sample_permutation(rng, n);
  r.applied = std::bernoulli_distribution(p)(rng);
  r.lambda = lambda;
  return r;
}

}  // namespace moex
