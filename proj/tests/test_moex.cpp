#include "moex/moex.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>

namespace moex {
namespace {

using T = Tensor4<double>;
using V = Var<double>;

const std::vector<NormScheme> kSchemes{NormScheme::pono(), NormScheme::instance(), NormScheme::layer(),
                                       NormScheme::group(4), NormScheme::un2()};

TEST(Permutation, IsBijection) {
  Rng rng(1);
  for (Index n : {1, 2, 7, 64}) {
    auto p = sample_permutation(rng, n);
    std::sort(p.begin(), p.end());
    std::vector<Index> id(static_cast<std::size_t>(n));
    std::iota(id.begin(), id.end(), Index(0));
    EXPECT_EQ(p, id);
  }
}

TEST(Permutation, UniformOverSymmetricGroup) {
  // Chi-square over the 6 permutations of 3 elements; 5 dof, p=0.001 cut 20.5.
  Rng rng(2);
  std::map<std::vector<Index>, int> counts;
  const int draws = 60000;
  for (int i = 0; i < draws; ++i) ++counts[sample_permutation(rng, 3)];
  ASSERT_EQ(counts.size(), 6u);
  double chi2 = 0;
  for (const auto& [perm, c] : counts) chi2 += (c - draws / 6.0) * (c - draws / 6.0) / (draws / 6.0);
  EXPECT_LT(chi2, 20.5);
}

TEST(Permutation, SingletonIsIdentity) {
  Rng rng(3);
  EXPECT_EQ(sample_permutation(rng, 1), std::vector<Index>{0});
}

TEST(Permutation, PairSwapsHalfTheTime) {
  Rng rng(6);
  int swaps = 0;
  for (int i = 0; i < 10000; ++i) swaps += sample_permutation(rng, 2)[0] == 1;
  EXPECT_NEAR(swaps / 10000.0, 0.5, 0.02);
}

TEST(Permutation, UniformPositionValueMarginals) {
  Rng rng(8);
  std::array<std::array<int, 5>, 5> cell{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto p = sample_permutation(rng, 5);
    for (std::size_t pos = 0; pos < 5; ++pos) ++cell[pos][static_cast<std::size_t>(p[pos])];
  }
  for (const auto& row : cell)
    for (int c : row) EXPECT_NEAR(c / double(draws), 0.2, 0.01);
}

TEST(DrawExchange, PermutationThenGateFromOneStream) {
  Rng a(9), b(9);
  const auto rec = draw_exchange(a, 5, 0.5, 0.9);
  const auto perm = sample_permutation(b, 5);
  const bool gate = std::bernoulli_distribution(0.5)(b);
  EXPECT_EQ(rec.perm, perm);
  EXPECT_EQ(rec.applied, gate);
  EXPECT_EQ(rec.lambda, 0.9);
  EXPECT_EQ(a(), b());
}

TEST(DrawExchange, GateFrequency) {
  Rng rng(4);
  for (double p : {0.0, 0.25, 1.0}) {
    int fired = 0;
    for (int i = 0; i < 4000; ++i) fired += draw_exchange(rng, 4, p, 0.9).applied;
    // 4 sd of a binomial(4000, p)
    EXPECT_NEAR(fired / 4000.0, p, 4 * std::sqrt(p * (1 - p) / 4000.0) + 1e-12) << p;
  }
}

TEST(DrawExchange, DonorIsSelfWhenGateClosed) {
  ExchangeRecord r{{2, 0, 1}, false, 0.9};
  EXPECT_EQ(donor(r, 0), 0);
  r.applied = true;
  EXPECT_EQ(donor(r, 0), 2);
}

TEST(Config, Validation) {
  MoExConfig c;
  EXPECT_NO_THROW(c.validate());
  c.p = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.p = 0.5;
  c.lambda = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_exchange_mode("mean"), ExchangeMode::MeanOnly);
  EXPECT_EQ(parse_insertion_point("stage3"), InsertionPoint::BeforeStage3);
  EXPECT_THROW(parse_insertion_point("stage4"), std::invalid_argument);
  EXPECT_EQ(to_string(parse_norm_scheme("gn4")), "gn4");
}

// With eps under the root, re-analysis moves sigma by
// eps (v_r - v_d) / (sigma_r^2 (sigma_out + sigma_d)), bounded below by the
// worst slice pair, and the content by |h_hat| times the relative sigma shift.
TEST(Exchange, TransplantsDonorMoments) {
  Rng rng(5);
  for (const auto& scheme : kSchemes) {
    for (int trial = 0; trial < 100; ++trial) {
      const T h = test::random_normal(Shape4{6, 16, 4, 4}, rng);
      const auto perm = sample_permutation(rng, 6);
      const T out = exchange_batch(h, perm, scheme);
      const auto before = analyze(h, scheme), after = analyze(out, scheme);
      const T donor_mean = detail::gather_batch(before.moments.mean, perm);
      const T donor_std = detail::gather_batch(before.moments.std, perm);
      const double lo = before.moments.std.array().minCoeff(), hi = before.moments.std.array().maxCoeff();
      const double sigma_bound = scheme.eps * std::max(hi / (lo * lo), 1.0 / lo);
      const double content_bound =
          before.normalized.hhat.array().abs().maxCoeff() * sigma_bound / after.moments.std.array().minCoeff();
      ASSERT_LE(max_abs_diff(after.moments.mean, donor_mean), 1e-12) << to_string(scheme);
      ASSERT_LE(max_abs_diff(after.moments.std, donor_std), sigma_bound) << to_string(scheme);
      ASSERT_LE(max_abs_diff(after.normalized.hhat, before.normalized.hhat), content_bound) << to_string(scheme);
    }
  }
}

TEST(Exchange, TransplantIsExactWithoutEpsilon) {
  Rng rng(15);
  for (auto scheme : kSchemes) {
    scheme.eps = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const T h = test::random_normal(Shape4{5, 8, 4, 4}, rng, 0.5, 1.0);
      const auto perm = sample_permutation(rng, 5);
      const auto before = analyze(h, scheme), after = analyze(exchange_batch(h, perm, scheme), scheme);
      ASSERT_LE(max_abs_diff(after.moments.std, detail::gather_batch(before.moments.std, perm)), 1e-10);
      ASSERT_LE(max_abs_diff(after.moments.mean, detail::gather_batch(before.moments.mean, perm)), 1e-10);
      ASSERT_LE(max_abs_diff(after.normalized.hhat, before.normalized.hhat), 1e-10) << to_string(scheme);
    }
  }
}

TEST(Exchange, HandComputedPono) {
  // Two instances, two channels, one position: h_A = (1,3), h_B = (10,14).
  T h(Shape4{2, 2, 1, 1});
  h[0] = 1, h[1] = 3, h[2] = 10, h[3] = 14;
  const NormScheme s{NormKind::PONO, 4, 0.0};
  const std::vector<Index> swap{1, 0};
  const T out = exchange_batch(h, swap, s);
  // A: hhat (-1, 1) with B's moments (12, 2) -> (10, 14); B: hhat (-1,1) with (2,1) -> (1,3).
  EXPECT_NEAR(out[0], 10, 1e-12);
  EXPECT_NEAR(out[1], 14, 1e-12);
  EXPECT_NEAR(out[2], 1, 1e-12);
  EXPECT_NEAR(out[3], 3, 1e-12);
  const T mean_only = exchange_batch(h, swap, s, ExchangeMode::MeanOnly);
  EXPECT_NEAR(mean_only[0], 11, 1e-12);  // 12 + 1*(-1)
  EXPECT_NEAR(mean_only[1], 13, 1e-12);
  const T std_only = exchange_batch(h, swap, s, ExchangeMode::StdOnly);
  EXPECT_NEAR(std_only[0], 0, 1e-12);  // 2 + 2*(-1)
  EXPECT_NEAR(std_only[1], 4, 1e-12);
}

TEST(Exchange, IdentityPermutationIsRoundTrip) {
  Rng rng(6);
  const T h = test::random_normal(Shape4{3, 4, 3, 3}, rng);
  for (const auto& scheme : kSchemes) {
    EXPECT_LE(max_abs_diff(exchange_batch(h, std::vector<Index>{0, 1, 2}, scheme), h), 1e-12) << to_string(scheme);
  }
}

TEST(Exchange, RejectsBadPermutations) {
  const T h(Shape4{3, 2, 2, 2}, 1.0);
  EXPECT_THROW(exchange_batch(h, std::vector<Index>{0, 1}, NormScheme::pono()), std::invalid_argument);
  EXPECT_THROW(exchange_batch(h, std::vector<Index>{0, 0, 1}, NormScheme::pono()), std::invalid_argument);
  EXPECT_THROW(exchange_batch(h, std::vector<Index>{0, 1, 3}, NormScheme::pono()), std::invalid_argument);
}

TEST(Exchange, InGraphMatchesTensorVersion) {
  Rng rng(7);
  const T h = test::random_normal(Shape4{4, 8, 3, 3}, rng);
  const std::vector<Index> perm{3, 2, 0, 1};
  for (const auto& scheme : kSchemes)
    for (auto mode : {ExchangeMode::Both, ExchangeMode::MeanOnly, ExchangeMode::StdOnly}) {
      const auto g = exchange_batch(V::constant(h), perm, scheme, mode);
      EXPECT_LE(max_abs_diff(g.value(), exchange_batch(h, perm, scheme, mode)), 1e-12) << to_string(scheme);
    }
}

TEST(Exchange, GradientReachesDonor) {
  Rng rng(8);
  auto x = V::leaf(test::random_normal(Shape4{2, 4, 2, 2}, rng));
  const std::vector<Index> swap{1, 0};
  auto y = exchange_batch(x, swap, NormScheme::pono());
  // Loss on instance 0's output only.
  T mask(y.shape());
  for (Index i = 0; i < y.shape().instance(); ++i) mask[i] = 1.0 + 0.1 * double(i);
  auto loss = sum(mul(y, V::constant(mask)));
  backward(loss);
  const T g = x.grad();
  const Index inst = x.shape().instance();
  double receiver = 0, donor_part = 0;
  for (Index i = 0; i < inst; ++i) {
    receiver += std::abs(g[i]);
    donor_part += std::abs(g[inst + i]);
  }
  EXPECT_GT(receiver, 1e-6);
  EXPECT_GT(donor_part, 1e-6);
}

TEST(Loss, TwoTermAndMixedTargetFormsAgree) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const T z = test::random_tensor(Shape4{5, 7, 1, 1}, rng, -4, 4);
    const T ya = test::random_distribution_rows(5, 7, rng), yb = test::random_distribution_rows(5, 7, rng);
    const double lambda = std::uniform_real_distribution<double>(0, 1)(rng);
    const double a = interpolated_loss(V::constant(z), ya, yb, lambda).value().item();
    const double b = interpolated_loss_mixed(V::constant(z), ya, yb, lambda).value().item();
    EXPECT_NEAR(a, b, 1e-10);
  }
}

TEST(Loss, HandComputedInterpolation) {
  // logits (0, ln 3): p = (1/4, 3/4).  lambda=0.9 on class 0, 0.1 on class 1.
  T z(Shape4{1, 2, 1, 1});
  z[1] = std::log(3.0);
  const T ya = one_hot<double>(std::vector<int>{0}, 2), yb = one_hot<double>(std::vector<int>{1}, 2);
  const double expected = 0.9 * std::log(4.0) + 0.1 * std::log(4.0 / 3.0);
  EXPECT_NEAR(interpolated_loss(V::constant(z), ya, yb, 0.9).value().item(), expected, 1e-14);
}

TEST(Loss, LambdaOneIsPlainCrossEntropy) {
  Rng rng(11);
  const T z = test::random_tensor(Shape4{4, 5, 1, 1}, rng, -2, 2);
  const std::vector<int> labels{0, 3, 4, 1};
  const T y = one_hot<double>(labels, 5);
  const T other = test::random_distribution_rows(4, 5, rng);

  auto grad_of = [&](auto make_loss) {
    auto zl = V::leaf(z);
    auto l = make_loss(zl);
    backward(l);
    return std::pair{l.value().item(), zl.grad()};
  };
  const auto [ce, g_ce] = grad_of([&](const V& zl) { return softmax_cross_entropy(zl, y); });
  const auto [mx, g_mx] = grad_of([&](const V& zl) { return interpolated_loss(zl, y, other, 1.0); });
  const auto [ls, g_ls] = grad_of([&](const V& zl) { return label_smooth_loss(zl, labels, 1.0, 5); });
  EXPECT_NEAR(mx, ce, 1e-12);
  EXPECT_NEAR(ls, ce, 1e-12);
  EXPECT_LE(max_abs_diff(g_mx, g_ce), 1e-10);
  EXPECT_LE(max_abs_diff(g_ls, g_ce), 1e-10);
}

TEST(Loss, SmoothedTargets) {
  const auto t = smoothed_targets<double>(std::vector<int>{2}, 4, 0.7);
  EXPECT_DOUBLE_EQ(t[2], 0.7);
  EXPECT_DOUBLE_EQ(t[0], 0.1);
  EXPECT_NEAR(t.array().sum(), 1.0, 1e-15);
  EXPECT_THROW(smoothed_targets<double>(std::vector<int>{0}, 1, 0.9), std::invalid_argument);
  EXPECT_THROW(check_lambda(1.5, "x"), std::invalid_argument);
}

TEST(Loss, LabelSmoothingHandComputed) {
  // Uniform logits over K=4: loss = -sum t log(1/4) = ln 4 regardless of lambda.
  const T z(Shape4{1, 4, 1, 1});
  EXPECT_NEAR(label_smooth_loss(V::constant(z), std::vector<int>{1}, 0.9, 4).value().item(), std::log(4.0), 1e-14);
}

}  // namespace
}  // namespace moex
