#include "moex/gradcheck_suite.hpp"

#include "moex/model.hpp"
#include "moex/normalization.hpp"

#include <functional>
#include <random>

namespace moex {
namespace {

using V = Var<double>;
using T = Tensor4<double>;

T uniform(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  T t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Magnitudes in [0.05, 1] with random sign, so no element sits on a ReLU kink.
T away_from_zero(Shape4 s, Rng& rng) {
  auto t = uniform(s, rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < t.size(); ++i)
    if (sign(rng)) t[i] = -t[i];
  return t;
}

T distribution_rows(Index n, Index k, Rng& rng) {
  auto t = uniform(Shape4{n, k, 1, 1}, rng, 0.01, 1.0);
  for (Index i = 0; i < n; ++i) {
    double s = 0;
    for (Index j = 0; j < k; ++j) s += t(i, j, 0, 0);
    for (Index j = 0; j < k; ++j) t(i, j, 0, 0) /= s;
  }
  return t;
}

// Projects an op's output onto a fixed random direction to get a scalar.
V project(const V& y, const T& dir) { return sum(mul(y, V::constant(dir))); }

using Case = std::function<GradCheckResult(Rng&)>;
using Fn = std::function<V(const std::vector<V>&)>;

std::vector<std::pair<std::string, Case>> cases() {
  std::vector<std::pair<std::string, Case>> out;
  auto unary = [&](std::string name, std::function<V(const V&)> op, bool positive = false) {
    out.emplace_back(name, [=](Rng& rng) {
      const Shape4 s{2, 3, 3, 4};
      auto x = positive ? uniform(s, rng, 0.2, 2.0) : away_from_zero(s, rng);
      auto dir = uniform(op(V::constant(x)).shape(), rng);
      return check_gradients(name, {V::leaf(x)}, [&](const std::vector<V>& l) { return project(op(l[0]), dir); });
    });
  };
  auto binary = [&](std::string name, std::function<V(const V&, const V&)> op, bool positive_b = false) {
    out.emplace_back(name, [=](Rng& rng) {
      const Shape4 s{2, 3, 3, 4};
      auto a = away_from_zero(s, rng);
      auto b = positive_b ? uniform(s, rng, 0.5, 2.0) : away_from_zero(s, rng);
      auto dir = uniform(s, rng);
      return check_gradients(name, {V::leaf(a), V::leaf(b)},
                             [&](const std::vector<V>& l) { return project(op(l[0], l[1]), dir); });
    });
  };
  unary("relu", [](const V& x) { return relu(x); });
  unary("scale", [](const V& x) { return scale(x, -1.7); });
  unary("add_scalar", [](const V& x) { return add_scalar(x, 0.3); });
  unary("sqrt", [](const V& x) { return moex::sqrt(x); }, true);
  unary("sum", [](const V& x) { return sum(x); });
  unary("global_avg_pool", [](const V& x) { return global_avg_pool(x); });
  binary("add", [](const V& a, const V& b) { return add(a, b); });
  binary("sub", [](const V& a, const V& b) { return sub(a, b); });
  binary("mul", [](const V& a, const V& b) { return mul(a, b); });
  binary("div", [](const V& a, const V& b) { return div(a, b); }, true);

  for (auto [stride, pad] : {std::pair<Index, Index>{1, 1}, {2, 1}, {1, 0}}) {
    const std::string name = "conv2d/s" + std::to_string(stride) + "p" + std::to_string(pad);
    out.emplace_back(name, [=](Rng& rng) {
      auto x = uniform(Shape4{2, 3, 5, 5}, rng);
      auto w = uniform(Shape4{4, 3, 3, 3}, rng);
      auto b = uniform(Shape4{1, 4, 1, 1}, rng);
      const Index ho = (5 + 2 * pad - 3) / stride + 1;
      auto dir = uniform(Shape4{2, 4, ho, ho}, rng);
      return check_gradients(name, {V::leaf(x), V::leaf(w), V::leaf(b)},
                             [&](const std::vector<V>& l) { return project(conv2d(l[0], l[1], l[2], stride, pad), dir); });
    });
  }
  out.emplace_back("affine", [](Rng& rng) {
    auto x = uniform(Shape4{3, 2, 2, 1}, rng);
    auto w = uniform(Shape4{4, 5, 1, 1}, rng);
    auto b = uniform(Shape4{1, 5, 1, 1}, rng);
    auto dir = uniform(Shape4{3, 5, 1, 1}, rng);
    return check_gradients("affine", {V::leaf(x), V::leaf(w), V::leaf(b)},
                           [&](const std::vector<V>& l) { return project(affine(l[0], l[1], l[2]), dir); });
  });
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    const std::string name = mode == Mode::Train ? "batchnorm/train" : "batchnorm/eval";
    out.emplace_back(name, [=](Rng& rng) {
      auto x = uniform(Shape4{3, 2, 3, 3}, rng, -2, 2);
      auto g = uniform(Shape4{1, 2, 1, 1}, rng, 0.5, 1.5);
      auto b = uniform(Shape4{1, 2, 1, 1}, rng);
      auto dir = uniform(x.shape(), rng);
      BatchNormState<double> st(2);
      st.running_mean.array() << 0.2, -0.1;
      st.running_var.array() << 1.3, 0.7;
      st.updates = 1;
      return check_gradients(name, {V::leaf(x), V::leaf(g), V::leaf(b)}, [&](const std::vector<V>& l) {
        BatchNormState<double> local = st;
        return project(batchnorm(l[0], l[1], l[2], local, mode), dir);
      });
    });
  }
  out.emplace_back("softmax_cross_entropy", [](Rng& rng) {
    auto z = uniform(Shape4{4, 6, 1, 1}, rng, -3, 3);
    auto t = distribution_rows(4, 6, rng);
    return check_gradients("softmax_cross_entropy", {V::leaf(z)},
                           [&](const std::vector<V>& l) { return softmax_cross_entropy(l[0], t); });
  });
  for (const NormScheme& scheme : {NormScheme::pono(), NormScheme::instance(), NormScheme::layer(), NormScheme::group(2),
                                   NormScheme::un2()}) {
    const std::string tag = "/" + to_string(scheme);
    out.emplace_back("slice_mean" + tag, [=](Rng& rng) {
      auto x = uniform(Shape4{2, 4, 3, 3}, rng);
      auto dir = uniform(SliceLayout(scheme, x.shape()).moment_shape(), rng);
      return check_gradients("slice_mean" + tag, {V::leaf(x)},
                             [&](const std::vector<V>& l) { return project(slice_mean(l[0], scheme), dir); });
    });
    out.emplace_back("slice_broadcast" + tag, [=](Rng& rng) {
      const Shape4 full{2, 4, 3, 3};
      auto m = uniform(SliceLayout(scheme, full).moment_shape(), rng);
      auto dir = uniform(full, rng);
      return check_gradients("slice_broadcast" + tag, {V::leaf(m)},
                             [&](const std::vector<V>& l) { return project(slice_broadcast(l[0], scheme, full), dir); });
    });
  }
  out.emplace_back("batch_gather", [](Rng& rng) {
    auto x = uniform(Shape4{4, 2, 2, 2}, rng);
    auto dir = uniform(x.shape(), rng);
    const std::vector<Index> perm{2, 0, 2, 1};  // not a bijection: exercises accumulation
    return check_gradients("batch_gather", {V::leaf(x)},
                           [&](const std::vector<V>& l) { return project(batch_gather<double>(l[0], perm), dir); });
  });
  out.emplace_back("concat_channels", [](Rng& rng) {
    auto a = uniform(Shape4{2, 1, 3, 3}, rng);
    auto b = uniform(Shape4{2, 2, 3, 3}, rng);
    auto dir = uniform(Shape4{2, 3, 3, 3}, rng);
    return check_gradients("concat_channels", {V::leaf(a), V::leaf(b)},
                           [&](const std::vector<V>& l) { return project(concat_channels(l[0], l[1]), dir); });
  });
  return out;
}

}  // namespace

std::vector<GradCheckResult> gradcheck_primitives(std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  std::uint64_t i = 0;
  for (const auto& [name, run] : cases()) {
    std::seed_seq seq{seed, i++};
    Rng rng(seq);
    results.push_back(run(rng));
    results.back().name = name;
  }
  return results;
}

GradCheckResult gradcheck_network(std::uint64_t seed, double step) {
  ResNetConfig cfg;
  cfg.blocks_per_stage = 1;
  cfg.widths = {8, 8, 8};
  cfg.in_channels = 8;
  cfg.classes = 5;
  cfg.variant = Variant::MoExHooked;
  std::seed_seq seq{seed, std::uint64_t(0x6c)};
  Rng rng(seq);
  auto params = init_params<double>(cfg, rng);
  // Perturb BN affine parameters and the bias away from their 1/0 defaults.
  for (auto& e : params.tensors)
    if (!e.decay || e.name == "fc.b") e.var.mutable_value().array() += uniform(e.var.shape(), rng, -0.3, 0.3).array();
  const T x = uniform(Shape4{4, 8, 8, 8}, rng);
  const T targets = distribution_rows(4, cfg.classes, rng);
  MoExConfig mc;
  mc.p = 1.0;
  const Rng draw_state = rng;

  std::vector<V> leaves;
  for (auto& e : params.tensors) leaves.push_back(e.var);
  auto f = [&](const std::vector<V>&) {
    Rng r = draw_state;  // same permutation on every evaluation
    auto fwd = forward(cfg, params, x, Mode::Train, ExchangeRequest{mc, &r});
    const auto& rec = *fwd.exchange;
    T donor(targets.shape());
    for (Index i = 0; i < 4; ++i)
      for (Index k = 0; k < cfg.classes; ++k) donor(i, k, 0, 0) = targets(rec.perm[static_cast<std::size_t>(i)], k, 0, 0);
    return interpolated_loss(fwd.logits, targets, donor, rec.lambda);
  };
  return check_gradients("network/moex-stem", leaves, f, step);
}

}  // namespace moex
