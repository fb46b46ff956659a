#pragma once

// 3-stage CIFAR residual network (depth 6n+2) with a single moment-exchange
// hook and the feature-probe variants (moments only / normalized only).

#include "moex/autodiff.hpp"
#include "moex/moex.hpp"
#include "moex/normalization.hpp"

#include <array>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace moex {

enum class Variant { Baseline, MomentsOnly, NormalizedOnly, MoExHooked };

std::string to_string(Variant v);
Variant parse_variant(std::string_view s);  // baseline | moments-only | normalized-only | moex

struct ResNetConfig {
  int blocks_per_stage = 3;
  std::array<Index, 3> widths{16, 32, 64};
  Index classes = 10;
  Index in_channels = 3;
  Variant variant = Variant::Baseline;
  double eps = 1e-5;  // PONO epsilon for the probe variants

  int depth() const { return 6 * blocks_per_stage + 2; }
  void validate() const;
};

template <typename Scalar>
struct ResNetParams {
  struct Entry {
    std::string name;
    Var<Scalar> var;
    bool decay;  // weight decay applies (false for batch-norm affine parameters)
  };
  std::vector<Entry> tensors;
  std::vector<std::pair<std::string, BatchNormState<Scalar>>> bn;

  Var<Scalar>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("parameter '" + name + "' not found");
    return tensors[it->second].var;
  }
  BatchNormState<Scalar>& bn_state(const std::string& name) {
    auto it = bn_index_.find(name);
    if (it == bn_index_.end()) throw std::out_of_range("batch-norm state '" + name + "' not found");
    return bn[it->second].second;
  }
  void add(std::string name, Tensor4<Scalar> value, bool decay) {
    index_[name] = tensors.size();
    tensors.push_back({std::move(name), Var<Scalar>::leaf(std::move(value)), decay});
  }
  void add_bn(std::string name, Index channels) {
    bn_index_[name] = bn.size();
    bn.emplace_back(std::move(name), BatchNormState<Scalar>(channels));
  }
  void zero_grad() {
    for (auto& e : tensors) e.var.zero_grad();
  }
  Index parameter_count() const {
    Index n = 0;
    for (const auto& e : tensors) n += e.var.value().size();
    return n;
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, std::size_t> bn_index_;
};

struct ExchangeRequest {
  MoExConfig config;
  Rng* rng;
};

template <typename Scalar>
struct ForwardResult {
  Var<Scalar> logits;
  std::optional<ExchangeRecord> exchange;
};

namespace detail {

template <typename Scalar>
Tensor4<Scalar> gaussian(Shape4 s, double sd, Rng& rng) {
  std::normal_distribution<double> g(0.0, sd);
  Tensor4<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(g(rng));
  return t;
}

template <typename Scalar>
void add_conv_bn(ResNetParams<Scalar>& p, const std::string& prefix, Index cin, Index cout, Index k, Rng& rng) {
  p.add(prefix + ".w", gaussian<Scalar>(Shape4{cout, cin, k, k}, std::sqrt(2.0 / double(cin * k * k)), rng), true);
  p.add(prefix + ".gamma", Tensor4<Scalar>(Shape4{1, cout, 1, 1}, Scalar(1)), false);
  p.add(prefix + ".beta", Tensor4<Scalar>(Shape4{1, cout, 1, 1}, Scalar(0)), false);
  p.add_bn(prefix, cout);
}

inline std::string block_name(int stage, int block) {
  return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block + 1);
}

}  // namespace detail

/// Input channel count seen by stage 1 (2 for the moments-only probe).
inline Index stage1_input_width(const ResNetConfig& cfg) {
  return cfg.variant == Variant::MomentsOnly ? 2 : cfg.widths[0];
}

/// Fan-in scaled Gaussian conv/linear weights, unit gamma, zero beta and bias.
template <typename Scalar>
ResNetParams<Scalar> init_params(const ResNetConfig& cfg, Rng& rng) {
  cfg.validate();
  ResNetParams<Scalar> p;
  detail::add_conv_bn(p, "stem", cfg.in_channels, cfg.widths[0], 3, rng);
  Index cin = stage1_input_width(cfg);
  for (int s = 0; s < 3; ++s) {
    const Index cout = cfg.widths[static_cast<std::size_t>(s)];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string name = detail::block_name(s, b);
      const bool downsample = s > 0 && b == 0;
      detail::add_conv_bn(p, name + ".conv1", cin, cout, 3, rng);
      detail::add_conv_bn(p, name + ".conv2", cout, cout, 3, rng);
      if (downsample || cin != cout) detail::add_conv_bn(p, name + ".proj", cin, cout, 1, rng);
      cin = cout;
    }
  }
  p.add("fc.w", detail::gaussian<Scalar>(Shape4{cin, cfg.classes, 1, 1}, std::sqrt(1.0 / double(cin)), rng), true);
  p.add("fc.b", Tensor4<Scalar>(Shape4{1, cfg.classes, 1, 1}), true);
  return p;
}

namespace detail {

template <typename Scalar>
Var<Scalar> conv_bn(ResNetParams<Scalar>& p, const std::string& prefix, const Var<Scalar>& x, Index stride,
                    Index pad, Mode mode) {
  auto y = conv2d(x, p.at(prefix + ".w"), stride, pad);
  return batchnorm(y, p.at(prefix + ".gamma"), p.at(prefix + ".beta"), p.bn_state(prefix), mode);
}

template <typename Scalar>
Var<Scalar> basic_block(ResNetParams<Scalar>& p, const std::string& name, const Var<Scalar>& x, Index stride,
                        Mode mode) {
  auto out = relu(conv_bn(p, name + ".conv1", x, stride, 1, mode));
  out = conv_bn(p, name + ".conv2", out, 1, 1, mode);
  Var<Scalar> shortcut = x;
  if (stride != 1 || x.shape().c != out.shape().c) shortcut = conv_bn(p, name + ".proj", x, stride, 0, mode);
  return relu(add(out, shortcut));
}

}  // namespace detail

/// Stem block output (conv-BN-ReLU) for a standardized batch.
template <typename Scalar>
Var<Scalar> stem_features(ResNetParams<Scalar>& params, const Tensor4<Scalar>& batch, Mode mode) {
  return relu(detail::conv_bn(params, "stem", Var<Scalar>::constant(batch), 1, 1, mode));
}

/// Everything after the stem: probe replacement, exchange hooks, the three
/// stages and the classifier head. When `exchange` is given (train mode only)
/// the permutation and Bernoulli gate are drawn at the insertion point and the
/// exchange is applied in-graph when the gate fires.
template <typename Scalar>
ForwardResult<Scalar> forward_features(const ResNetConfig& cfg, ResNetParams<Scalar>& params, Var<Scalar> h, Mode mode,
                                       std::optional<ExchangeRequest> exchange = std::nullopt) {
  if (exchange) {
    if (mode != Mode::Train) throw std::invalid_argument("forward: moment exchange is training-only");
    if (cfg.variant == Variant::MomentsOnly)
      throw std::invalid_argument("forward: moment exchange is undefined for the moments-only variant");
    exchange->config.validate();
  }
  ForwardResult<Scalar> result;
  auto hook = [&](Var<Scalar> x, InsertionPoint here) {
    if (!exchange || exchange->config.insertion != here) return x;
    const auto& mc = exchange->config;
    ExchangeRecord rec = draw_exchange(*exchange->rng, x.shape().n, mc.p, mc.lambda);
    if (rec.applied) x = exchange_batch(x, rec.perm, mc.scheme, mc.mode);
    result.exchange = std::move(rec);
    return x;
  };

  if (cfg.variant == Variant::MomentsOnly) {
    h = moment_feature_map(h, cfg.eps);
  } else if (cfg.variant == Variant::NormalizedOnly) {
    h = analyze(h, NormScheme::pono(cfg.eps)).hhat;
  }
  h = hook(h, InsertionPoint::AfterFirstBlock);
  for (int s = 0; s < 3; ++s) {
    if (s == 1) h = hook(h, InsertionPoint::BeforeStage2);
    if (s == 2) h = hook(h, InsertionPoint::BeforeStage3);
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      h = detail::basic_block(params, detail::block_name(s, b), h, (s > 0 && b == 0) ? 2 : 1, mode);
    }
  }
  result.logits = affine(global_avg_pool(h), params.at("fc.w"), params.at("fc.b"));
  return result;
}

/// Logits for a standardized batch.
template <typename Scalar>
ForwardResult<Scalar> forward(const ResNetConfig& cfg, ResNetParams<Scalar>& params, const Tensor4<Scalar>& batch,
                              Mode mode, std::optional<ExchangeRequest> exchange = std::nullopt) {
  if (exchange && mode != Mode::Train) throw std::invalid_argument("forward: moment exchange is training-only");
  return forward_features(cfg, params, stem_features(params, batch, mode), mode, exchange);
}

}  // namespace moex
