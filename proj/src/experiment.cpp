#include "moex/experiment.hpp"

#include "moex/checkpoint.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>

namespace moex {

using nlohmann::json;

void ExperimentSpec::validate() const {
  if (data.source != "synth" && data.source != "cifar10")
    throw ConfigError("--data must be synth or cifar10, got '" + data.source + "'");
  if (data.source == "cifar10" && data.path.empty()) throw ConfigError("--data cifar10 needs --data-path");
  if (data.subset < 0) throw ConfigError("--subset must be >= 0");
  if (data.source == "synth") {
    if (data.synth.classes != model.classes)
      throw ConfigError("synthetic class count " + std::to_string(data.synth.classes) + " differs from the model's " +
                        std::to_string(model.classes));
    if (data.synth.n_per_class < 1 || data.synth_test_per_class < 1)
      throw ConfigError("--synth-per-class and --synth-test-per-class must be >= 1");
    if (!(data.synth.noise >= 0)) throw ConfigError("--synth-noise must be >= 0");
  }
  if (stats) {
    for (double s : stats->std)
      if (!(s > 0)) throw ConfigError("standardization std must be positive");
  }
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json moex_json(const MoExConfig& m) {
  return {{"scheme", to_string(m.scheme)}, {"scheme_eps", m.scheme.eps}, {"insert", to_string(m.insertion)},
          {"p", m.p},  {"lambda", m.lambda},  {"mode", to_string(m.mode)}};
}

MoExConfig moex_from_json(const json& j) {
  MoExConfig m;
  m.scheme = parse_norm_scheme(j.at("scheme").get<std::string>(), j.at("scheme_eps").get<double>());
  m.insertion = parse_insertion_point(j.at("insert").get<std::string>());
  m.p = j.at("p").get<double>();
  m.lambda = j.at("lambda").get<double>();
  m.mode = parse_exchange_mode(j.at("mode").get<std::string>());
  return m;
}

}  // namespace

json to_json(const ExperimentSpec& s) {
  json j;
  j["data"] = {{"source", s.data.source},
               {"path", s.data.path.string()},
               {"subset", s.data.subset},
               {"seed", s.data.seed},
               {"synth",
                {{"n_per_class", s.data.synth.n_per_class},
                 {"test_per_class", s.data.synth_test_per_class},
                 {"classes", s.data.synth.classes},
                 {"noise", s.data.synth.noise},
                 {"amplitude", s.data.synth.amplitude}}}};
  j["model"] = {{"blocks_per_stage", s.model.blocks_per_stage}, {"widths", s.model.widths},
                {"classes", s.model.classes},                   {"in_channels", s.model.in_channels},
                {"variant", to_string(s.model.variant)},        {"eps", s.model.eps}};
  const TrainConfig& t = s.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"base_lr", t.base_lr},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"schedule", t.schedule == ScheduleKind::Cosine ? "cosine" : "step"},
                {"milestones", t.milestones},
                {"gamma", t.gamma},
                {"seed", t.seed},
                {"augment", to_string(t.augment)},
                {"crop_pad", t.crop_pad},
                {"cutout_size", t.cutout_size},
                {"mixup_alpha", t.mixup_alpha},
                {"loss", to_string(t.loss)},
                {"moex", t.moex ? moex_json(*t.moex) : json(nullptr)},
                {"smoothing_lambda", t.smoothing_lambda},
                {"record_wall_time", t.record_wall_time}};
  j["precision"] = s.double_precision ? "double" : "float";
  if (s.stats)
    j["stats"] = {{"mean", s.stats->mean}, {"std", s.stats->std}};
  else
    j["stats"] = nullptr;
  return j;
}

ExperimentSpec spec_from_json(const json& j) {
  try {
    ExperimentSpec s;
    const auto& d = j.at("data");
    s.data.source = d.at("source").get<std::string>();
    s.data.path = d.at("path").get<std::string>();
    s.data.subset = d.at("subset").get<Index>();
    s.data.seed = d.at("seed").get<std::uint64_t>();
    const auto& sy = d.at("synth");
    s.data.synth.n_per_class = sy.at("n_per_class").get<Index>();
    s.data.synth_test_per_class = sy.at("test_per_class").get<Index>();
    s.data.synth.classes = sy.at("classes").get<int>();
    s.data.synth.noise = sy.at("noise").get<double>();
    s.data.synth.amplitude = sy.at("amplitude").get<double>();

    const auto& m = j.at("model");
    s.model.blocks_per_stage = m.at("blocks_per_stage").get<int>();
    s.model.widths = m.at("widths").get<std::array<Index, 3>>();
    s.model.classes = m.at("classes").get<Index>();
    s.model.in_channels = m.at("in_channels").get<Index>();
    s.model.variant = parse_variant(m.at("variant").get<std::string>());
    s.model.eps = m.at("eps").get<double>();

    const auto& t = j.at("train");
    s.train.epochs = t.at("epochs").get<int>();
    s.train.batch_size = t.at("batch_size").get<Index>();
    s.train.base_lr = t.at("base_lr").get<double>();
    s.train.momentum = t.at("momentum").get<double>();
    s.train.weight_decay = t.at("weight_decay").get<double>();
    const auto sched = t.at("schedule").get<std::string>();
    if (sched != "cosine" && sched != "step") throw ConfigError("unknown schedule '" + sched + "'");
    s.train.schedule = sched == "cosine" ? ScheduleKind::Cosine : ScheduleKind::Step;
    s.train.milestones = t.at("milestones").get<std::vector<int>>();
    s.train.gamma = t.at("gamma").get<double>();
    s.train.seed = t.at("seed").get<std::uint64_t>();
    s.train.augment = parse_pixel_augment(t.at("augment").get<std::string>());
    s.train.crop_pad = t.at("crop_pad").get<Index>();
    s.train.cutout_size = t.at("cutout_size").get<Index>();
    s.train.mixup_alpha = t.at("mixup_alpha").get<double>();
    s.train.loss = parse_loss_mode(t.at("loss").get<std::string>());
    if (!t.at("moex").is_null()) s.train.moex = moex_from_json(t.at("moex"));
    s.train.smoothing_lambda = t.at("smoothing_lambda").get<double>();
    s.train.record_wall_time = t.at("record_wall_time").get<bool>();

    s.double_precision = j.at("precision").get<std::string>() == "double";
    if (!j.at("stats").is_null()) {
      ChannelStats st;
      st.mean = j.at("stats").at("mean").get<std::array<double, 3>>();
      st.std = j.at("stats").at("std").get<std::array<double, 3>>();
      s.stats = st;
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed experiment spec: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("malformed experiment spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Runs

LoadedData load_data(ExperimentSpec& spec) {
  LoadedData out;
  if (spec.data.source == "cifar10") {
    if (!std::filesystem::is_directory(spec.data.path))
      throw ConfigError("CIFAR-10 directory not found: " + spec.data.path.string());
    CifarSplits splits;
    try {
      splits = load_cifar10_dir(spec.data.path);
    } catch (const std::runtime_error& e) {
      throw ConfigError(e.what());
    }
    out.train = spec.data.subset > 0 ? seeded_subset(splits.train, spec.data.subset, spec.data.seed) : splits.train;
    out.test = std::move(splits.test);
  } else {
    SynthConfig sc = spec.data.synth;
    sc.seed = spec.data.seed;
    sc.split = 0;
    out.train = synth_moment_dataset(sc).data;
    sc.split = 1;
    sc.n_per_class = spec.data.synth_test_per_class;
    out.test = synth_moment_dataset(sc).data;
  }
  if (!spec.stats) spec.stats = compute_channel_stats(out.train);
  out.stats = *spec.stats;
  return out;
}

std::filesystem::path sidecar_path_for(const std::filesystem::path& csv) {
  auto p = csv;
  return p.replace_extension(".json");
}

json sidecar_json(const ExperimentSpec& spec, const RunOutcome& run) {
  json log = json::array();
  for (const auto& e : run.rng_log) log.push_back({{"step", e.step}, {"applied", e.applied}, {"perm", e.perm}});
  json rows = json::array();
  rows.push_back(metrics_csv_header());
  for (const auto& r : run.history) rows.push_back(format_metrics_row(r));
  return {{"format", "moex-run"}, {"version", 1}, {"spec", to_json(spec)}, {"rng_log", log}, {"metrics_csv", rows}};
}

namespace {

template <typename Scalar>
RunOutcome run_typed(const ExperimentSpec& spec, const LoadedData& data, const RunOutputs& out, std::ostream* progress) {
  std::ofstream csv;
  if (!out.csv.empty()) {
    if (out.csv.has_parent_path()) std::filesystem::create_directories(out.csv.parent_path());
    csv.open(out.csv, std::ios::binary);
    if (!csv) throw ConfigError("cannot write " + out.csv.string());
    csv << metrics_csv_header() << '\n';
  }
  auto on_epoch = [&](const MetricsRow& row) {
    const std::string line = format_metrics_row(row);
    if (csv.is_open()) csv << line << '\n' << std::flush;
    if (progress) *progress << line << std::endl;
  };
  auto result = train<Scalar>(spec.train, spec.model, data.train, data.test, data.stats, on_epoch);
  RunOutcome run{std::move(result.history), std::move(result.rng_log)};
  if (!out.checkpoint.empty()) write_checkpoint(checkpoint_tensors(result.params), out.checkpoint);
  if (!out.sidecar.empty()) {
    std::ofstream side(out.sidecar, std::ios::binary);
    if (!side) throw ConfigError("cannot write " + out.sidecar.string());
    side << sidecar_json(spec, run).dump(1) << '\n';
  }
  return run;
}

}  // namespace

RunOutcome run_experiment(const ExperimentSpec& spec, const LoadedData& data, const RunOutputs& out,
                          std::ostream* progress) {
  spec.validate();
  if (!spec.stats) throw ConfigError("run_experiment: standardization constants are not resolved");
  return spec.double_precision ? run_typed<double>(spec, data, out, progress)
                               : run_typed<float>(spec, data, out, progress);
}

// ---------------------------------------------------------------------------
// Ablations

bool AblationGrid::any_axis() const {
  return !losses.empty() || !lambdas.empty() || !ps.empty() || !schemes.empty() || !inserts.empty() ||
         !modes.empty() || !augments.empty();
}

std::vector<AblationCell> expand_grid(const AblationGrid& g, const ExperimentSpec& base) {
  std::vector<AblationCell> cells;
  if (!g.any_axis()) return cells;
  const MoExConfig m0 = base.train.moex.value_or(MoExConfig{});
  auto or_base = [](const auto& axis, auto value) {
    using T = std::decay_t<decltype(value)>;
    return axis.empty() ? std::vector<T>{value} : std::vector<T>(axis.begin(), axis.end());
  };
  const auto losses = or_base(g.losses, base.train.loss);
  const auto lambdas = or_base(g.lambdas, base.train.loss == LossMode::LabelSmoothing ? base.train.smoothing_lambda : m0.lambda);
  const auto ps = or_base(g.ps, m0.p);
  const auto schemes = or_base(g.schemes, m0.scheme);
  const auto inserts = or_base(g.inserts, m0.insertion);
  const auto modes = or_base(g.modes, m0.mode);
  const auto augments = or_base(g.augments, base.train.augment);
  // Axes a loss mode ignores are collapsed, so no cell is run twice.
  for (LossMode loss : losses) {
    const bool uses_lambda = loss != LossMode::Plain;
    const bool uses_p = loss == LossMode::MoEx || loss == LossMode::InterpolationOnly;
    const bool uses_exchange = loss == LossMode::MoEx;
    for (PixelAugment aug : augments)
      for (std::size_t li = 0; li < (uses_lambda ? lambdas.size() : 1); ++li)
        for (std::size_t pi = 0; pi < (uses_p ? ps.size() : 1); ++pi)
          for (std::size_t si = 0; si < (uses_exchange ? schemes.size() : 1); ++si)
            for (std::size_t ii = 0; ii < (uses_exchange ? inserts.size() : 1); ++ii)
              for (std::size_t mi = 0; mi < (uses_exchange ? modes.size() : 1); ++mi) {
                AblationCell c;
                c.loss = loss;
                c.augment = aug;
                c.moex = m0;
                if (uses_lambda) c.moex.lambda = lambdas[li];
                if (uses_p) c.moex.p = ps[pi];
                if (uses_exchange) {
                  c.moex.scheme = schemes[si];
                  c.moex.insertion = inserts[ii];
                  c.moex.mode = modes[mi];
                }
                cells.push_back(c);
              }
  }
  return cells;
}

std::vector<AblationCell> preset_cells(std::string_view preset, const ExperimentSpec& base) {
  const MoExConfig m0 = base.train.moex.value_or(MoExConfig{});
  const PixelAugment aug = base.train.augment;
  auto cell = [&](LossMode loss, auto&& edit) {
    AblationCell c{loss, m0, aug};
    edit(c.moex);
    return c;
  };
  auto keep = [](MoExConfig&) {};
  std::vector<AblationCell> cells;
  if (preset == "losses") {
    cells.push_back(cell(LossMode::Plain, keep));
    cells.push_back(cell(LossMode::LabelSmoothing, [](MoExConfig& m) { m.lambda = 0.9; }));
    cells.push_back(cell(LossMode::InterpolationOnly, [](MoExConfig& m) { m.lambda = 0.9; }));
    cells.push_back(cell(LossMode::MoEx, [](MoExConfig& m) { m.lambda = 1.0; }));
    cells.push_back(cell(LossMode::MoEx, [](MoExConfig& m) { m.lambda = 0.9; }));
  } else if (preset == "lambda-p") {
    for (double lambda : {0.6, 0.7, 0.8, 0.9})
      for (double p : {0.25, 0.5, 0.75, 1.0})
        cells.push_back(cell(LossMode::MoEx, [&](MoExConfig& m) {
          m.lambda = lambda;
          m.p = p;
        }));
  } else if (preset == "schemes") {
    cells.push_back(cell(LossMode::Plain, keep));
    for (const NormScheme& s : {NormScheme::layer(), NormScheme::instance(), NormScheme::group(4), NormScheme::pono()})
      cells.push_back(cell(LossMode::MoEx, [&](MoExConfig& m) { m.scheme = s; }));
    for (ExchangeMode mode : {ExchangeMode::MeanOnly, ExchangeMode::StdOnly})
      cells.push_back(cell(LossMode::MoEx, [&](MoExConfig& m) {
        m.scheme = NormScheme::pono();
        m.mode = mode;
      }));
    cells.push_back(cell(LossMode::MoEx, [](MoExConfig& m) { m.scheme = NormScheme::un2(); }));
  } else if (preset == "layers") {
    for (const NormScheme& s : {NormScheme::layer(), NormScheme::instance(), NormScheme::group(4), NormScheme::pono()})
      for (InsertionPoint at : {InsertionPoint::AfterFirstBlock, InsertionPoint::BeforeStage2, InsertionPoint::BeforeStage3})
        cells.push_back(cell(LossMode::MoEx, [&](MoExConfig& m) {
          m.scheme = s;
          m.insertion = at;
        }));
  } else {
    throw ConfigError("unknown preset '" + std::string(preset) + "' (losses | lambda-p | schemes | layers)");
  }
  return cells;
}

ExperimentSpec apply_cell(const ExperimentSpec& base, const AblationCell& cell, std::uint64_t seed) {
  ExperimentSpec s = base;
  s.train.seed = seed;
  s.train.loss = cell.loss;
  s.train.augment = cell.augment;
  s.train.moex.reset();
  if (cell.loss == LossMode::MoEx || cell.loss == LossMode::InterpolationOnly) s.train.moex = cell.moex;
  if (cell.loss == LossMode::LabelSmoothing) s.train.smoothing_lambda = cell.moex.lambda;
  if (cell.loss == LossMode::MoEx && s.model.variant == Variant::Baseline) s.model.variant = Variant::MoExHooked;
  if (cell.loss != LossMode::MoEx && s.model.variant == Variant::MoExHooked) s.model.variant = Variant::Baseline;
  return s;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1)) / std::sqrt(double(v.size()));
}

namespace {

std::string fixed(double v, int precision) {
  if (std::isnan(v)) return "nan";
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed, precision);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf.data(), ptr);
}

}  // namespace

std::string ablation_csv_header() {
  return "cell,loss,scheme,insert,mode,p,lambda,augment,seeds,failed,mean_test_err,stderr_test_err";
}

std::string format_ablation_row(std::size_t index, const CellSummary& s) {
  const auto& c = s.cell;
  const bool exchange = c.loss == LossMode::MoEx;
  const bool paired = exchange || c.loss == LossMode::InterpolationOnly;
  std::string row = std::to_string(index) + ',' + to_string(c.loss) + ',';
  row += (exchange ? to_string(c.moex.scheme) : "-") + ',';
  row += (exchange ? to_string(c.moex.insertion) : "-") + ',';
  row += (exchange ? to_string(c.moex.mode) : "-") + ',';
  row += (paired ? fixed(c.moex.p, 2) : "-") + ',';
  row += (c.loss != LossMode::Plain ? fixed(c.moex.lambda, 2) : "-") + ',';
  row += to_string(c.augment) + ',';
  row += std::to_string(s.test_errors.size()) + ',' + std::to_string(s.failures.size()) + ',';
  row += fixed(mean_of(s.test_errors), 4) + ',' + fixed(standard_error(s.test_errors), 4);
  return row;
}

std::vector<CellSummary> run_ablation(const ExperimentSpec& base, const std::vector<AblationCell>& cells,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_csv,
                                      const std::filesystem::path& runs_dir, std::ostream* progress) {
  if (cells.empty()) throw ConfigError("ablation grid is empty");
  if (seeds.empty()) throw ConfigError("--seeds is empty");
  if (out_csv.has_parent_path()) std::filesystem::create_directories(out_csv.parent_path());
  std::ofstream csv(out_csv, std::ios::binary);
  if (!csv) throw ConfigError("cannot write " + out_csv.string());
  csv << ablation_csv_header() << '\n' << std::flush;
  if (!runs_dir.empty()) std::filesystem::create_directories(runs_dir);

  ExperimentSpec resolved = base;
  const LoadedData data = load_data(resolved);
  std::vector<CellSummary> summaries;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    CellSummary s{cells[i], {}, {}};
    for (std::uint64_t seed : seeds) {
      try {
        const ExperimentSpec spec = apply_cell(resolved, cells[i], seed);
        RunOutputs out;
        if (!runs_dir.empty()) {
          out.csv = runs_dir / ("cell" + std::to_string(i) + "_seed" + std::to_string(seed) + ".csv");
          out.sidecar = sidecar_path_for(out.csv);
        }
        const auto run = run_experiment(spec, data, out);
        s.test_errors.push_back(run.history.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                    : run.history.back().test_err);
      } catch (const std::exception& e) {
        s.failures.push_back("seed " + std::to_string(seed) + ": " + e.what());
        if (progress) *progress << "cell " << i << " seed " << seed << " failed: " << e.what() << std::endl;
      }
    }
    const std::string row = format_ablation_row(i, s);
    csv << row << '\n' << std::flush;
    if (progress) *progress << row << std::endl;
    summaries.push_back(std::move(s));
  }
  return summaries;
}

}  // namespace moex
