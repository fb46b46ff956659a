#include "moex/train.hpp"

#include <array>
#include <charconv>
#include <numbers>

namespace moex {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline:
      return "baseline";
    case Variant::MomentsOnly:
      return "moments-only";
    case Variant::NormalizedOnly:
      return "normalized-only";
    case Variant::MoExHooked:
      return "moex";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::Baseline;
  if (s == "moments-only") return Variant::MomentsOnly;
  if (s == "normalized-only") return Variant::NormalizedOnly;
  if (s == "moex") return Variant::MoExHooked;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

void ResNetConfig::validate() const {
  if (blocks_per_stage < 1) throw std::invalid_argument("model: blocks per stage must be >= 1");
  if (classes < 2) throw std::invalid_argument("model: need at least 2 classes");
  for (Index w : widths)
    if (w < 1) throw std::invalid_argument("model: stage widths must be positive");
}

double lr_at(const LrSchedule& schedule, long step, long total_steps) {
  if (step < 0 || step > total_steps) throw std::out_of_range("lr_at: step outside [0, total_steps]");
  if (schedule.kind == ScheduleKind::Cosine) {
    if (total_steps == 0) return schedule.base_lr;
    return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
  }
  int passed = 0;
  for (long m : schedule.milestones)
    if (step >= m) ++passed;
  return schedule.base_lr * std::pow(schedule.gamma, passed);
}

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::Plain:
      return "plain";
    case LossMode::MoEx:
      return "moex";
    case LossMode::LabelSmoothing:
      return "smooth";
    case LossMode::InterpolationOnly:
      return "interp-only";
  }
  return "?";
}

std::string to_string(PixelAugment a) {
  switch (a) {
    case PixelAugment::None:
      return "none";
    case PixelAugment::CropFlip:
      return "crop-flip";
    case PixelAugment::Cutout:
      return "cutout";
    case PixelAugment::Mixup:
      return "mixup";
    case PixelAugment::Cutmix:
      return "cutmix";
  }
  return "?";
}

LossMode parse_loss_mode(std::string_view s) {
  if (s == "plain") return LossMode::Plain;
  if (s == "moex") return LossMode::MoEx;
  if (s == "smooth") return LossMode::LabelSmoothing;
  if (s == "interp-only") return LossMode::InterpolationOnly;
  throw std::invalid_argument("unknown loss mode '" + std::string(s) + "'");
}

PixelAugment parse_pixel_augment(std::string_view s) {
  if (s == "none") return PixelAugment::None;
  if (s == "crop-flip") return PixelAugment::CropFlip;
  if (s == "cutout") return PixelAugment::Cutout;
  if (s == "mixup") return PixelAugment::Mixup;
  if (s == "cutmix") return PixelAugment::Cutmix;
  throw std::invalid_argument("unknown augmentation '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(base_lr >= 0)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must lie in [0,1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
  if (crop_pad < 0) throw std::invalid_argument("crop pad must be >= 0");
  if (cutout_size < 0 || cutout_size > kImageSide) throw std::invalid_argument("cutout size must lie in [0,32]");
  if (!(mixup_alpha > 0)) throw std::invalid_argument("mixup alpha must be positive");
  check_lambda(smoothing_lambda, "label smoothing");
  const bool pairs = loss == LossMode::MoEx || loss == LossMode::InterpolationOnly;
  if (pairs != moex.has_value()) {
    throw std::invalid_argument(pairs ? "loss mode " + to_string(loss) + " needs a moex configuration"
                                      : "a moex configuration requires loss mode moex or interp-only");
  }
  if (moex) {
    moex->validate();
    if (batch_size < 2) throw std::invalid_argument("moex needs batch size >= 2 so that a pair exists");
  }
}

std::string metrics_csv_header() { return "epoch,train_loss,train_err,test_err,lr,wall_time_s,seed"; }

namespace {
void append_fixed(std::string& out, double v, int precision) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed, precision);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  out.append(buf.data(), ptr);
}
}  // namespace

std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.epoch);
  for (auto [v, prec] : {std::pair{r.train_loss, 6}, {r.train_err, 4}, {r.test_err, 4}, {r.lr, 8}, {r.wall_time_s, 3}}) {
    s += ',';
    append_fixed(s, v, prec);
  }
  s += ',';
  s += std::to_string(r.seed);
  return s;
}

ExperimentStreams::ExperimentStreams(std::uint64_t seed) : init(), augment(), moex() {
  std::seed_seq a{seed, std::uint64_t(1)}, b{seed, std::uint64_t(2)}, c{seed, std::uint64_t(3)};
  init.seed(a);
  augment.seed(b);
  moex.seed(c);
}

namespace detail {
Image<std::uint8_t> to_image(std::span<const std::uint8_t> bytes) {
  Image<std::uint8_t> img(kImageChannels, kImageSide, kImageSide);
  std::copy(bytes.begin(), bytes.end(), img.px.begin());
  return img;
}
}  // namespace detail

}  // namespace moex
