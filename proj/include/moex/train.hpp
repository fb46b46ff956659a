#pragma once

#include "moex/augment.hpp"
#include "moex/data.hpp"
#include "moex/model.hpp"
#include "moex/moex.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace moex {

// ---------------------------------------------------------------------------
// Learning-rate schedule

enum class ScheduleKind { Cosine, Step };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  double base_lr = 0.1;
  std::vector<long> milestones;  // steps, for ScheduleKind::Step
  double gamma = 0.1;
};

/// cosine: base * 0.5 * (1 + cos(pi * step / total)); step: base * gamma^(milestones passed).
double lr_at(const LrSchedule& schedule, long step, long total_steps);

// ---------------------------------------------------------------------------
// Optimizer

template <typename Scalar>
struct SgdState {
  std::vector<Tensor4<Scalar>> velocity;
};

/// One SGD step with momentum and L2 weight decay: v = m*v + g + wd*w; w -= lr*v.
/// Entries need `.var` and `.decay` members.
template <typename Scalar, typename Entries>
void sgd_step(Entries& entries, SgdState<Scalar>& state, double lr, double momentum, double weight_decay) {
  if (state.velocity.size() != entries.size()) {
    state.velocity.clear();
    for (const auto& e : entries) state.velocity.emplace_back(e.var.shape());
  }
  std::size_t i = 0;
  for (auto& e : entries) {
    auto& w = e.var.mutable_value().array();
    auto& v = state.velocity[i++].array();
    const Tensor4<Scalar> g = e.var.grad();
    if (e.decay && weight_decay != 0.0) {
      v = Scalar(momentum) * v + g.array() + Scalar(weight_decay) * w;
    } else {
      v = Scalar(momentum) * v + g.array();
    }
    w -= Scalar(lr) * v;
  }
}

// ---------------------------------------------------------------------------
// Configuration

enum class LossMode { Plain, MoEx, LabelSmoothing, InterpolationOnly };
enum class PixelAugment { None, CropFlip, Cutout, Mixup, Cutmix };

std::string to_string(LossMode m);
std::string to_string(PixelAugment a);
LossMode parse_loss_mode(std::string_view s);          // plain | moex | smooth | interp-only
PixelAugment parse_pixel_augment(std::string_view s);  // none | crop-flip | cutout | mixup | cutmix

struct TrainConfig {
  int epochs = 30;
  Index batch_size = 128;
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  ScheduleKind schedule = ScheduleKind::Cosine;
  std::vector<int> milestones;  // epochs, for the step schedule
  double gamma = 0.1;
  std::uint64_t seed = 1;
  PixelAugment augment = PixelAugment::CropFlip;
  Index crop_pad = 4;
  Index cutout_size = 16;
  double mixup_alpha = 1.0;
  LossMode loss = LossMode::Plain;
  std::optional<MoExConfig> moex;  // p and lambda also drive interpolation-only
  double smoothing_lambda = 0.9;
  bool record_wall_time = false;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct MetricsRow {
  int epoch = 0;
  double train_loss = 0, train_err = 0, test_err = 0, lr = 0, wall_time_s = 0;
  std::uint64_t seed = 0;
};

std::string metrics_csv_header();
std::string format_metrics_row(const MetricsRow& row);

/// One entry per optimization step in which a pair permutation was drawn.
struct RngLogEntry {
  long step = 0;
  bool applied = false;
  std::vector<Index> perm;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(long step, double loss)
      : std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Top-1 error in percent of (N,K,1,1) logits against labels.
template <typename Scalar>
double error_rate(const Tensor4<Scalar>& logits, std::span<const int> labels) {
  const Index n = logits.shape().n, k = logits.shape().instance();
  if (n == 0) return 0.0;
  Index wrong = 0;
  auto z = logits.matrix(n, k);
  for (Index i = 0; i < n; ++i) {
    Index arg = 0;
    z.row(i).maxCoeff(&arg);
    if (arg != labels[static_cast<std::size_t>(i)]) ++wrong;
  }
  return 100.0 * double(wrong) / double(n);
}

/// Eval-mode forward over the whole dataset; returns (N,K,1,1) logits.
template <typename Scalar>
Tensor4<Scalar> predict(const ResNetConfig& model, ResNetParams<Scalar>& params, const ImageDataset& data,
                        const ChannelStats& stats, Index batch_size = 250) {
  NoGradGuard no_grad;
  Tensor4<Scalar> out(data.size(), model.classes, 1, 1);
  const auto order = epoch_order(data.size(), false, 0, 0);
  Index row = 0;
  for (auto idx : split_batches(order, batch_size)) {
    const auto b = assemble_batch<Scalar>(data, idx, stats);
    const auto logits = forward(model, params, b.x, Mode::Eval).logits;
    out.array().segment(row * model.classes, logits.value().size()) = logits.value().array();
    row += logits.shape().n;
  }
  return out;
}

template <typename Scalar>
double evaluate(const ResNetConfig& model, ResNetParams<Scalar>& params, const ImageDataset& data,
                const ChannelStats& stats) {
  if (data.size() == 0) return 0.0;
  return error_rate(predict(model, params, data, stats), data.labels);
}

// ---------------------------------------------------------------------------
// Training loop

template <typename Scalar>
struct TrainResult {
  ResNetParams<Scalar> params;
  std::vector<MetricsRow> history;
  std::vector<RngLogEntry> rng_log;
};

/// Seeded, independent random streams of one experiment.
struct ExperimentStreams {
  Rng init, augment, moex;
  explicit ExperimentStreams(std::uint64_t seed);
};

namespace detail {

Image<std::uint8_t> to_image(std::span<const std::uint8_t> bytes);

/// Applies crop/flip/cutout in u8 space and standardizes into the batch tensor.
template <typename Scalar>
void augment_label_preserving(const TrainConfig& cfg, const ImageDataset& data, std::span<const Index> idx,
                              const ChannelStats& stats, Rng& rng, Tensor4<Scalar>& x) {
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Image<std::uint8_t> img = to_image(data.image(idx[i]));
    if (cfg.augment != PixelAugment::None) {
      img = pad_crop(img, cfg.crop_pad, rng);
      img = hflip(img, 0.5, rng);
    }
    if (cfg.augment == PixelAugment::Cutout) img = cutout(img, cfg.cutout_size, rng);
    standardize_into<Scalar>(img.px, stats, x.data() + static_cast<Index>(i) * kImageBytes);
  }
}

/// Mixup or CutMix against a random in-batch partner; one coefficient / box per batch.
/// Rewrites x and the soft target rows in place.
template <typename Scalar>
void augment_label_mixing(const TrainConfig& cfg, Rng& rng, Tensor4<Scalar>& x, Tensor4<double>& targets) {
  const Index n = x.shape().n, k = targets.shape().c, inst = x.shape().instance();
  const auto partner = sample_permutation(rng, n);
  Box box;
  double lam = 1.0;
  if (cfg.augment == PixelAugment::Mixup) {
    std::gamma_distribution<double> ga(cfg.mixup_alpha, 1.0);
    const double a = ga(rng), b = ga(rng);
    lam = (a + b) > 0 ? a / (a + b) : 1.0;
  } else {
    box = draw_cutmix_box(rng, x.shape().h, x.shape().w);
  }
  const Tensor4<Scalar> src = x;
  const Tensor4<double> ysrc = targets;
  for (Index i = 0; i < n; ++i) {
    const Index j = partner[static_cast<std::size_t>(i)];
    Image<Scalar> a(x.shape().c, x.shape().h, x.shape().w), b = a;
    std::copy_n(src.data() + i * inst, inst, a.px.begin());
    std::copy_n(src.data() + j * inst, inst, b.px.begin());
    std::vector<double> ya(ysrc.data() + i * k, ysrc.data() + (i + 1) * k), yb(ysrc.data() + j * k, ysrc.data() + (j + 1) * k);
    const AugmentedExample ex = cfg.augment == PixelAugment::Mixup ? mixup(a, b, ya, yb, lam) : cutmix_at(a, b, ya, yb, box);
    for (Index e = 0; e < inst; ++e) x[i * inst + e] = Scalar(ex.image.px[static_cast<std::size_t>(e)]);
    for (Index c = 0; c < k; ++c) targets[i * k + c] = ex.lambda_pixel * ya[static_cast<std::size_t>(c)] + (1.0 - ex.lambda_pixel) * yb[static_cast<std::size_t>(c)];
  }
}

template <typename Scalar>
Tensor4<Scalar> smooth_rows(const Tensor4<double>& t, double lambda) {
  const Index n = t.shape().n, k = t.shape().c;
  Tensor4<Scalar> out(t.shape());
  for (Index i = 0; i < n * k; ++i) out[i] = Scalar(lambda * t[i] + (1.0 - lambda) * (1.0 - t[i]) / double(k - 1));
  return out;
}

}  // namespace detail

/// The per-step loss for a given loss mode. `record` is the pair draw for the
/// step (absent when no pairing was drawn). Targets are soft rows (N,K,1,1).
template <typename Scalar>
Var<Scalar> step_loss(const TrainConfig& cfg, const Var<Scalar>& logits, const Tensor4<double>& targets,
                      const std::optional<ExchangeRecord>& record) {
  switch (cfg.loss) {
    case LossMode::LabelSmoothing:
      return softmax_cross_entropy(logits, detail::smooth_rows<Scalar>(targets, cfg.smoothing_lambda));
    case LossMode::MoEx:
    case LossMode::InterpolationOnly:
      if (record && record->applied) {
        Tensor4<double> donor(targets.shape());
        const Index k = targets.shape().c;
        for (Index i = 0; i < targets.shape().n; ++i)
          donor.array().segment(i * k, k) = targets.array().segment(record->perm[static_cast<std::size_t>(i)] * k, k);
        return interpolated_loss(logits, targets.template cast<Scalar>(), donor.template cast<Scalar>(), record->lambda);
      }
      [[fallthrough]];
    case LossMode::Plain:
      break;
  }
  return softmax_cross_entropy(logits, targets.template cast<Scalar>());
}

template <typename Scalar>
TrainResult<Scalar> train(const TrainConfig& cfg, const ResNetConfig& model, const ImageDataset& train_set,
                          const ImageDataset& test_set, const ChannelStats& stats,
                          const std::function<void(const MetricsRow&)>& on_epoch = {}) {
  cfg.validate();
  model.validate();
  if (train_set.classes != model.classes) throw std::invalid_argument("train: dataset/model class count mismatch");
  ExperimentStreams streams(cfg.seed);
  TrainResult<Scalar> result{init_params<Scalar>(model, streams.init), {}, {}};
  auto& params = result.params;
  SgdState<Scalar> opt;

  const bool exchange = cfg.loss == LossMode::MoEx;
  const auto order0 = split_batches(epoch_order(train_set.size(), false, 0, 0), cfg.batch_size);
  const long steps_per_epoch = static_cast<long>(order0.size());
  const long total_steps = steps_per_epoch * cfg.epochs;
  LrSchedule schedule{cfg.schedule, cfg.base_lr, {}, cfg.gamma};
  for (int m : cfg.milestones) schedule.milestones.push_back(static_cast<long>(m) * steps_per_epoch);

  const auto start = std::chrono::steady_clock::now();
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(train_set.size(), true, cfg.seed, epoch);
    double loss_sum = 0, wrong = 0;
    const double epoch_lr = lr_at(schedule, step, total_steps);
    for (auto idx : split_batches(order, cfg.batch_size)) {
      const Index n = static_cast<Index>(idx.size());
      Tensor4<Scalar> x(n, kImageChannels, kImageSide, kImageSide);
      detail::augment_label_preserving(cfg, train_set, idx, stats, streams.augment, x);
      std::vector<int> labels;
      for (Index i : idx) labels.push_back(train_set.labels[static_cast<std::size_t>(i)]);
      Tensor4<double> targets = one_hot<double>(labels, model.classes);
      if ((cfg.augment == PixelAugment::Mixup || cfg.augment == PixelAugment::Cutmix) && n >= 2)
        detail::augment_label_mixing(cfg, streams.augment, x, targets);

      std::optional<ExchangeRequest> request;
      if (exchange) request = ExchangeRequest{*cfg.moex, &streams.moex};
      auto fwd = forward(model, params, x, Mode::Train, request);
      if (cfg.loss == LossMode::InterpolationOnly)
        fwd.exchange = draw_exchange(streams.moex, n, cfg.moex->p, cfg.moex->lambda);
      if (fwd.exchange) result.rng_log.push_back({step, fwd.exchange->applied, fwd.exchange->perm});

      auto loss = step_loss(cfg, fwd.logits, targets, fwd.exchange);
      const double lv = double(loss.value().item());
      if (!std::isfinite(lv)) throw DivergenceError(step, lv);
      loss_sum += lv * double(n);
      wrong += error_rate(fwd.logits.value(), labels) * double(n) / 100.0;

      params.zero_grad();
      backward(loss);
      sgd_step(params.tensors, opt, lr_at(schedule, step, total_steps), cfg.momentum, cfg.weight_decay);
      ++step;
    }
    MetricsRow row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / double(train_set.size());
    row.train_err = 100.0 * wrong / double(train_set.size());
    row.test_err = evaluate(model, params, test_set, stats);
    row.lr = epoch_lr;
    if (cfg.record_wall_time)
      row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    row.seed = cfg.seed;
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

}  // namespace moex
