#include "moex/train.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace moex {
namespace {

using T = Tensor4<double>;
using V = Var<double>;

struct Entry {
  V var;
  bool decay = true;
};

TEST(LrSchedule, CosineEndpointsAndMidpoint) {
  LrSchedule s{ScheduleKind::Cosine, 0.1, {}, 0.1};
  EXPECT_DOUBLE_EQ(lr_at(s, 0, 100), 0.1);
  EXPECT_NEAR(lr_at(s, 100, 100), 0.0, 1e-12);
  EXPECT_NEAR(lr_at(s, 50, 100), 0.05, 1e-15);
  EXPECT_THROW(lr_at(s, 101, 100), std::out_of_range);
}

TEST(LrSchedule, StepDecay) {
  LrSchedule s{ScheduleKind::Step, 0.1, {10, 20}, 0.1};
  EXPECT_DOUBLE_EQ(lr_at(s, 9, 30), 0.1);
  EXPECT_NEAR(lr_at(s, 10, 30), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(s, 25, 30), 0.001, 1e-15);
}

// Quadratic stand-in: loss = 0.5 * sum(a * w^2), gradient a * w.
V quadratic_loss(const V& w, const T& a) { return scale(sum(mul(mul(w, w), V::constant(a))), 0.5); }

TEST(Sgd, TwoMomentumStepsMatchClosedForm) {
  Rng rng(1);
  const T w0 = test::random_normal(Shape4{2, 3, 1, 1}, rng), a = test::random_tensor(Shape4{2, 3, 1, 1}, rng, 0.5, 2.0);
  const double lr = 0.1, m = 0.9, wd = 0.01;
  std::vector<Entry> e{{V::leaf(w0), true}};
  SgdState<double> st;
  for (int s = 0; s < 2; ++s) {
    e[0].var.zero_grad();
    auto loss = quadratic_loss(e[0].var, a);
    backward(loss);
    sgd_step(e, st, lr, m, wd);
  }
  // v1 = (a + wd) w0; w1 = w0 - lr v1; v2 = m v1 + (a + wd) w1; w2 = w1 - lr v2.
  const auto k = (a.array() + wd);
  const Eigen::ArrayXd v1 = k * w0.array();
  const Eigen::ArrayXd w1 = w0.array() - lr * v1;
  const Eigen::ArrayXd v2 = m * v1 + k * w1;
  const Eigen::ArrayXd w2 = w1 - lr * v2;
  EXPECT_LE((e[0].var.value().array() - w2).abs().maxCoeff(), 1e-10);
}

TEST(Sgd, WeightDecayIsExactL2) {
  Rng rng(2);
  const T w0 = test::random_normal(Shape4{1, 5, 1, 1}, rng);
  std::vector<Entry> e{{V::leaf(w0), true}, {V::leaf(w0), false}};
  SgdState<double> st;
  for (auto& x : e) {
    auto zero = scale(sum(x.var), 0.0);  // loss identically zero
    backward(zero);
  }
  sgd_step(e, st, 0.1, 0.0, 5e-4);
  const Eigen::ArrayXd expected = w0.array() - 0.1 * 5e-4 * w0.array();
  EXPECT_LE((e[0].var.value().array() - expected).abs().maxCoeff(), 1e-15);
  EXPECT_TRUE((e[1].var.value().array() == w0.array()).all());
}

TEST(Sgd, BatchNormAffineIsNotDecayed) {
  Rng rng(3);
  auto p = init_params<double>(ResNetConfig{}, rng);
  for (const auto& e : p.tensors) {
    const bool bn = e.name.ends_with(".gamma") || e.name.ends_with(".beta");
    EXPECT_EQ(e.decay, !bn) << e.name;
  }
}

struct Tiny {
  ImageDataset train, test;
  ChannelStats stats;
  ResNetConfig model;
  TrainConfig cfg;
  Tiny() {
    SynthConfig s;
    s.classes = 4;
    s.n_per_class = 6;
    train = synth_moment_dataset(s).data;
    s.split = 1;
    s.n_per_class = 3;
    test = synth_moment_dataset(s).data;
    stats = compute_channel_stats(train);
    model.blocks_per_stage = 1;
    model.widths = {4, 8, 8};
    model.classes = 4;
    cfg.epochs = 2;
    cfg.batch_size = 8;
  }
};

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  Tiny t;
  t.cfg.base_lr = 0.0;
  const auto r = train<double>(t.cfg, t.model, t.train, t.test, t.stats);
  ExperimentStreams streams(t.cfg.seed);
  const auto init = init_params<double>(t.model, streams.init);
  for (std::size_t i = 0; i < init.tensors.size(); ++i)
    EXPECT_TRUE((r.params.tensors[i].var.value().array() == init.tensors[i].var.value().array()).all())
        << init.tensors[i].name;
}

TEST(Train, SeedDeterminism) {
  Tiny t;
  const auto a = train<double>(t.cfg, t.model, t.train, t.test, t.stats);
  const auto b = train<double>(t.cfg, t.model, t.train, t.test, t.stats);
  ASSERT_EQ(a.history.size(), 2u);
  for (std::size_t i = 0; i < a.history.size(); ++i)
    EXPECT_EQ(format_metrics_row(a.history[i]), format_metrics_row(b.history[i]));
}

TEST(Train, ZeroProbabilityMatchesNoMoEx) {
  Tiny t;
  const auto base = train<double>(t.cfg, t.model, t.train, t.test, t.stats);
  t.cfg.loss = LossMode::MoEx;
  t.cfg.moex = MoExConfig{};
  t.cfg.moex->p = 0.0;
  t.model.variant = Variant::MoExHooked;
  const auto off = train<double>(t.cfg, t.model, t.train, t.test, t.stats);
  ASSERT_EQ(base.history.size(), off.history.size());
  for (std::size_t i = 0; i < base.history.size(); ++i)
    EXPECT_EQ(format_metrics_row(base.history[i]), format_metrics_row(off.history[i]));
  EXPECT_EQ(off.rng_log.size(), 6u);  // 24 images in batches of 8, two epochs
  for (const auto& e : off.rng_log) EXPECT_FALSE(e.applied);
}

TEST(Train, InterpolationOnlyDrawsPairsWithoutExchange) {
  Tiny t;
  t.cfg.loss = LossMode::InterpolationOnly;
  t.cfg.moex = MoExConfig{};
  t.cfg.moex->p = 1.0;
  const auto r = train<double>(t.cfg, t.model, t.train, t.test, t.stats);
  ASSERT_EQ(r.rng_log.size(), 6u);
  for (const auto& e : r.rng_log) EXPECT_TRUE(e.applied);
}

TEST(Train, DivergenceReportsStep) {
  Tiny t;
  t.cfg.base_lr = 1e30;
  t.cfg.schedule = ScheduleKind::Step;
  try {
    train<float>(t.cfg, t.model, t.train, t.test, t.stats);
    FAIL() << "no divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 1);
  }
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  c.loss = LossMode::MoEx;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.moex = MoExConfig{};
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.batch_size = 2;
  EXPECT_NO_THROW(c.validate());
  c.smoothing_lambda = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(StepLoss, UnitLambdaReducesToPlainCrossEntropy) {
  Rng rng(5);
  const T z = test::random_normal(Shape4{6, 5, 1, 1}, rng);
  const std::vector<int> labels{0, 1, 2, 3, 4, 0};
  const T y = one_hot<double>(labels, 5);
  auto grad_of = [&](const TrainConfig& cfg, const std::optional<ExchangeRecord>& rec) {
    auto logits = V::leaf(z);
    auto loss = step_loss(cfg, logits, y, rec);
    backward(loss);
    return logits.grad();
  };
  TrainConfig plain;
  const T g = grad_of(plain, std::nullopt);
  TrainConfig smooth;
  smooth.loss = LossMode::LabelSmoothing;
  smooth.smoothing_lambda = 1.0;
  EXPECT_LE(max_abs_diff(grad_of(smooth, std::nullopt), g), 1e-10);
  TrainConfig mx;
  mx.loss = LossMode::MoEx;
  mx.moex = MoExConfig{};
  const ExchangeRecord rec{{5, 4, 3, 2, 1, 0}, true, 1.0};
  EXPECT_LE(max_abs_diff(grad_of(mx, rec), g), 1e-10);
}

TEST(Evaluate, ErrorRateOracles) {
  std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_EQ(error_rate(scale(V::constant(one_hot<double>(labels, 10)), 5.0).value(), labels), 0.0);

  Rng rng(6);
  const Index n = 20000;
  const T logits = test::random_normal(Shape4{n, 10, 1, 1}, rng);
  std::vector<int> y(static_cast<std::size_t>(n));
  std::uniform_int_distribution<int> pick(0, 9);
  for (auto& v : y) v = pick(rng);
  const double err = error_rate(logits, y);
  EXPECT_NEAR(err, 90.0, 2.0);
  // Independent tally through a confusion matrix.
  std::array<std::array<Index, 10>, 10> confusion{};
  for (Index i = 0; i < n; ++i) {
    int arg = 0;
    for (int k = 1; k < 10; ++k)
      if (logits(i, k, 0, 0) > logits(i, arg, 0, 0)) arg = k;
    ++confusion[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])][static_cast<std::size_t>(arg)];
  }
  Index diag = 0;
  for (std::size_t k = 0; k < 10; ++k) diag += confusion[k][k];
  EXPECT_NEAR(err, 100.0 - 100.0 * double(diag) / double(n), 1e-9);
}

TEST(Evaluate, DeterministicAndPure) {
  Tiny t;
  Rng rng(7);
  auto p = init_params<double>(t.model, rng);
  const double a = evaluate(t.model, p, t.test, t.stats), b = evaluate(t.model, p, t.test, t.stats);
  EXPECT_EQ(a, b);
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, 100.0);
}

TEST(Metrics, CsvFormatting) {
  EXPECT_EQ(metrics_csv_header(), "epoch,train_loss,train_err,test_err,lr,wall_time_s,seed");
  MetricsRow r;
  r.epoch = 3;
  r.train_loss = 0.5;
  r.train_err = 12.25;
  r.test_err = 40;
  r.lr = 0.05;
  r.seed = 2;
  EXPECT_EQ(format_metrics_row(r), "3,0.500000,12.2500,40.0000,0.05000000,0.000,2");
}

}  // namespace
}  // namespace moex
