#include "moex/checkpoint.hpp"
#include "moex/experiment.hpp"
#include "moex/gradcheck_suite.hpp"
#include "moex/pnm.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <ostream>

namespace moex {
namespace {

// Flag values before they are resolved into an ExperimentSpec.
struct SpecFlags {
  ExperimentSpec spec;
  std::string variant = "baseline";
  std::string scheme = "pono";
  std::string mode = "both";
  std::string insert = "stem";
  std::string aug = "crop-flip";
  std::string loss;
  std::string schedule = "cosine";
  std::string precision = "float";
  MoExConfig moex;
  int classes = 10;
  std::vector<CLI::Option*> moex_options;
};

void add_data_flags(CLI::App* app, SpecFlags& f) {
  auto& d = f.spec.data;
  app->add_option("--data", d.source, "Dataset")->check(CLI::IsMember({"synth", "cifar10"}));
  app->add_option("--data-path", d.path, "CIFAR-10 binary directory");
  app->add_option("--subset", d.subset, "CIFAR-10 training images kept (0 = all)")->check(CLI::NonNegativeNumber);
  app->add_option("--data-seed", d.seed, "Seed of the CIFAR subset or the synthetic data");
  app->add_option("--synth-per-class", d.synth.n_per_class, "Synthetic training images per class")->check(CLI::PositiveNumber);
  app->add_option("--synth-test-per-class", d.synth_test_per_class, "Synthetic test images per class")
      ->check(CLI::PositiveNumber);
  app->add_option("--synth-noise", d.synth.noise, "Synthetic per-channel noise sd (pixel units)")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--synth-amplitude", d.synth.amplitude, "Synthetic class pattern amplitude");
  app->add_option("--classes", f.classes, "Number of classes")->check(CLI::Range(2, 16));
}

void add_spec_flags(CLI::App* app, SpecFlags& f) {
  add_data_flags(app, f);
  auto& t = f.spec.train;
  app->add_option("--variant", f.variant, "Network variant")
      ->check(CLI::IsMember({"baseline", "moments-only", "normalized-only"}));
  app->add_option("--n-blocks", f.spec.model.blocks_per_stage, "Residual blocks per stage (depth 6n+2)")
      ->check(CLI::PositiveNumber);
  f.moex_options = {
      app->add_option("--moex-scheme", f.scheme, "Normalization whose moments are exchanged")
          ->check(CLI::IsMember({"pono", "in", "ln", "gn2", "gn4", "gn8", "un2"})),
      app->add_option("--moex-p", f.moex.p, "Exchange probability per batch")->check(CLI::Range(0.0, 1.0)),
      app->add_option("--moex-lambda", f.moex.lambda, "Label interpolation weight")->check(CLI::Range(0.0, 1.0)),
      app->add_option("--moex-mode", f.mode, "Moments to exchange")->check(CLI::IsMember({"both", "mean", "std"})),
      app->add_option("--insert", f.insert, "Exchange location")->check(CLI::IsMember({"stem", "stage2", "stage3"})),
  };
  app->add_option("--aug", f.aug, "Pixel augmentation")
      ->check(CLI::IsMember({"none", "crop-flip", "cutout", "mixup", "cutmix"}));
  app->add_option("--loss", f.loss, "Loss mode (default: moex when a --moex-* flag is given)")
                      ->check(CLI::IsMember({"plain", "moex", "smooth", "interp-only"}));
  app->add_option("--epochs", t.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  app->add_option("--batch", t.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  app->add_option("--lr", t.base_lr, "Base learning rate")->check(CLI::NonNegativeNumber);
  app->add_option("--momentum", t.momentum, "SGD momentum")->check(CLI::Range(0.0, 0.999999));
  app->add_option("--wd", t.weight_decay, "Weight decay")->check(CLI::NonNegativeNumber);
  app->add_option("--schedule", f.schedule, "Learning-rate schedule")->check(CLI::IsMember({"cosine", "step"}));
  app->add_option("--milestones", t.milestones, "Step-schedule milestones (epochs)")->delimiter(',');
  app->add_option("--gamma", t.gamma, "Step-schedule decay factor");
  app->add_option("--seed", t.seed, "Training seed");
  app->add_option("--smooth-lambda", t.smoothing_lambda, "Label-smoothing target weight")->check(CLI::Range(0.0, 1.0));
  app->add_option("--crop-pad", t.crop_pad, "Padding for random crops")->check(CLI::NonNegativeNumber);
  app->add_option("--cutout-size", t.cutout_size, "Cutout square side")->check(CLI::Range(0, 32));
  app->add_option("--mixup-alpha", t.mixup_alpha, "Mixup Beta(alpha, alpha)")->check(CLI::PositiveNumber);
  app->add_option("--precision", f.precision, "Arithmetic precision")->check(CLI::IsMember({"float", "double"}));
  app->add_flag("--wall-time", t.record_wall_time, "Record wall time in the CSV (breaks byte-identity)");
}

ExperimentSpec resolve(SpecFlags& f) {
  ExperimentSpec s = f.spec;
  s.model.classes = f.classes;
  s.data.synth.classes = f.classes;
  s.model.variant = parse_variant(f.variant);
  s.train.augment = parse_pixel_augment(f.aug);
  s.train.schedule = f.schedule == "cosine" ? ScheduleKind::Cosine : ScheduleKind::Step;
  s.double_precision = f.precision == "double";
  bool moex_flag = false;
  for (auto* o : f.moex_options) moex_flag = moex_flag || o->count() > 0;
  if (!f.loss.empty()) {
    s.train.loss = parse_loss_mode(f.loss);
  } else {
    s.train.loss = moex_flag ? LossMode::MoEx : LossMode::Plain;
  }
  MoExConfig m = f.moex;
  m.scheme = parse_norm_scheme(f.scheme);
  m.mode = parse_exchange_mode(f.mode);
  m.insertion = parse_insertion_point(f.insert);
  if (s.train.loss == LossMode::MoEx || s.train.loss == LossMode::InterpolationOnly) s.train.moex = m;
  if (s.train.loss == LossMode::MoEx && s.model.variant == Variant::Baseline) s.model.variant = Variant::MoExHooked;
  s.validate();
  return s;
}

// --- train -----------------------------------------------------------------

int cmd_train(SpecFlags& f, const std::filesystem::path& out_csv, std::filesystem::path checkpoint, std::ostream& out) {
  ExperimentSpec spec = resolve(f);
  const LoadedData data = load_data(spec);
  if (checkpoint.empty()) checkpoint = std::filesystem::path(out_csv).replace_extension(".ckpt");
  out << "# " << to_string(spec.model.variant) << " depth " << spec.model.depth() << ", loss " << to_string(spec.train.loss)
      << ", " << data.train.size() << " train / " << data.test.size() << " test images\n";
  const RunOutputs outputs{out_csv, sidecar_path_for(out_csv), checkpoint};
  const auto run = run_experiment(spec, data, outputs, &out);
  if (!run.history.empty()) out << "final test_err " << std::fixed << std::setprecision(4) << run.history.back().test_err << "\n";
  return kExitOk;
}

// --- ablate ----------------------------------------------------------------

struct AblateFlags {
  std::string preset;
  std::vector<std::string> losses, schemes, inserts, modes, augs;
  std::vector<double> lambdas, ps;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::filesystem::path runs_dir;
  std::vector<CLI::Option*> axis_options;
};

int cmd_ablate(SpecFlags& f, AblateFlags& a, const std::filesystem::path& out_csv, std::ostream& out) {
  // Cells carry their own loss and moex settings; the base only supplies
  // defaults for axes that are not swept. Without --loss the default is moex.
  const std::string loss = f.loss.empty() ? "moex" : f.loss;
  f.loss = "plain";
  ExperimentSpec base = resolve(f);
  base.train.loss = parse_loss_mode(loss);
  MoExConfig m = f.moex;
  m.scheme = parse_norm_scheme(f.scheme);
  m.mode = parse_exchange_mode(f.mode);
  m.insertion = parse_insertion_point(f.insert);
  base.train.moex = m;
  std::vector<AblationCell> cells;
  if (!a.preset.empty()) cells = preset_cells(a.preset, base);
  AblationGrid g;
  for (const auto& s : a.losses) g.losses.push_back(parse_loss_mode(s));
  for (const auto& s : a.schemes) g.schemes.push_back(parse_norm_scheme(s));
  for (const auto& s : a.inserts) g.inserts.push_back(parse_insertion_point(s));
  for (const auto& s : a.modes) g.modes.push_back(parse_exchange_mode(s));
  for (const auto& s : a.augs) g.augments.push_back(parse_pixel_augment(s));
  g.lambdas = a.lambdas;
  g.ps = a.ps;
  for (double v : g.lambdas) check_lambda(v, "--lambdas");
  for (double v : g.ps)
    if (!(v >= 0 && v <= 1)) throw ConfigError("--ps: probability must lie in [0,1]");
  bool axis_flag = false;
  for (auto* o : a.axis_options) axis_flag = axis_flag || o->count() > 0;
  if (axis_flag && !g.any_axis()) throw ConfigError("ablation grid is empty");
  const auto grid = expand_grid(g, base);
  cells.insert(cells.end(), grid.begin(), grid.end());
  if (cells.empty()) throw ConfigError("ablation grid is empty (give --preset or at least one axis)");
  base.train.moex.reset();
  out << "# " << cells.size() << " cells x " << a.seeds.size() << " seeds\n";
  run_ablation(base, cells, a.seeds, out_csv, a.runs_dir, &out);
  return kExitOk;
}

// --- gradcheck -------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, double tol, bool skip_network, std::ostream& out) {
  auto results = gradcheck_primitives(seed);
  if (!skip_network) results.push_back(gradcheck_network(seed));
  bool ok = true;
  out << std::left << std::setw(28) << "case" << std::right << std::setw(9) << "checked" << std::setw(14) << "max_rel_err"
      << std::setw(14) << "max_abs_err" << "  status\n";
  for (const auto& r : results) {
    const bool pass = r.max_rel_error <= tol && r.checked > 0;
    ok = ok && pass;
    out << std::left << std::setw(28) << r.name << std::right << std::setw(9) << r.checked << std::scientific
        << std::setprecision(3) << std::setw(14) << r.max_rel_error << std::setw(14) << r.max_abs_error
        << std::defaultfloat << "  " << (pass ? "ok" : "FAIL") << "\n";
  }
  out << (ok ? "all cases within " : "violations above ") << tol << "\n";
  return ok ? kExitOk : kExitFailure;
}

// --- dump-moments ----------------------------------------------------------

int cmd_dump_moments(SpecFlags& f, const std::filesystem::path& image_path, long index, const std::string& layer,
                     const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
                     std::ostream& out) {
  if (image_path.empty() == (index < 0)) throw ConfigError("give exactly one of --image or --index");
  Image<std::uint8_t> img;
  std::string name;
  ChannelStats stats;
  if (!image_path.empty()) {
    if (!std::filesystem::exists(image_path)) throw ConfigError("image not found: " + image_path.string());
    img = read_pnm(image_path);
    name = image_path.stem().string();
    for (auto& m : stats.mean) m = 0;
    for (auto& s : stats.std) s = 255;
  } else {
    ExperimentSpec spec = f.spec;
    spec.model.classes = spec.data.synth.classes = f.classes;
    const LoadedData data = load_data(spec);
    if (index >= data.train.size()) throw ConfigError("--index " + std::to_string(index) + " is past the training set");
    img = detail::to_image(data.train.image(index));
    name = "index" + std::to_string(index);
    stats = data.stats;
  }

  Tensor4<double> h;
  if (layer == "input") {
    h = Tensor4<double>(1, img.channels, img.height, img.width);
    for (std::size_t i = 0; i < img.px.size(); ++i) h[static_cast<Index>(i)] = img.px[i];
  } else {
    if (img.channels == 1) {  // replicate gray into RGB
      Image<std::uint8_t> rgb(3, img.height, img.width);
      for (Index c = 0; c < 3; ++c) std::copy(img.px.begin(), img.px.end(), rgb.px.begin() + c * img.height * img.width);
      img = std::move(rgb);
    }
    Tensor4<double> x(1, 3, img.height, img.width);
    const Index plane = img.height * img.width;
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < plane; ++i)
        x[c * plane + i] = (img.px[static_cast<std::size_t>(c * plane + i)] - stats.mean[static_cast<std::size_t>(c)]) /
                           stats.std[static_cast<std::size_t>(c)];
    ResNetConfig cfg;
    cfg.blocks_per_stage = f.spec.model.blocks_per_stage;
    cfg.classes = f.classes;
    ExperimentStreams streams(f.spec.train.seed);
    auto params = init_params<double>(cfg, streams.init);
    if (!checkpoint.empty()) {
      if (!std::filesystem::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint.string());
      restore_checkpoint(params, read_checkpoint(checkpoint));
    }
    NoGradGuard no_grad;
    h = stem_features(params, x, Mode::Eval).value();
  }
  const auto [mean_img, std_img] = moment_images(h);
  std::filesystem::create_directories(out_dir);
  const auto mean_path = out_dir / (name + "_mean.pgm"), std_path = out_dir / (name + "_std.pgm");
  write_pgm(mean_img, mean_path);
  write_pgm(std_img, std_path);
  out << mean_path.string() << " [" << mean_img.lo << ", " << mean_img.hi << "]\n"
      << std_path.string() << " [" << std_img.lo << ", " << std_img.hi << "]\n";
  return kExitOk;
}

// --- synth-data ------------------------------------------------------------

int cmd_synth_data(SpecFlags& f, const std::filesystem::path& out_dir, std::ostream& out) {
  SynthConfig sc = f.spec.data.synth;
  sc.seed = f.spec.data.seed;
  sc.classes = f.classes;
  std::filesystem::create_directories(out_dir);
  sc.split = 0;
  const auto train = synth_moment_dataset(sc);
  write_cifar10_binary(train.data, out_dir / "train.bin");
  sc.split = 1;
  sc.n_per_class = f.spec.data.synth_test_per_class;
  write_cifar10_binary(synth_moment_dataset(sc).data, out_dir / "test.bin");
  out << (out_dir / "train.bin").string() << ": " << train.data.size() << " images\n"
      << (out_dir / "test.bin").string() << ": " << sc.n_per_class * sc.classes << " images\n"
      << "template margin " << train.template_margin << "\n";
  return kExitOk;
}

// --- replay ----------------------------------------------------------------

int cmd_replay(const std::filesystem::path& sidecar, std::filesystem::path out_csv, std::ostream& out, std::ostream& err) {
  std::ifstream in(sidecar);
  if (!in) throw ConfigError("sidecar not found: " + sidecar.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + sidecar.string() + ": " + e.what());
  }
  if (j.value("format", "") != "moex-run") throw ConfigError(sidecar.string() + " is not a run sidecar");
  ExperimentSpec spec = spec_from_json(j.at("spec"));
  if (out_csv.empty()) out_csv = std::filesystem::path(sidecar).replace_extension(".replay.csv");
  const LoadedData data = load_data(spec);
  const auto run = run_experiment(spec, data, RunOutputs{out_csv, {}, {}});
  const auto fresh = sidecar_json(spec, run);
  bool same = true;
  if (fresh.at("metrics_csv") != j.at("metrics_csv")) {
    err << "replay: metrics differ from the recorded run\n";
    same = false;
  }
  if (fresh.at("rng_log") != j.at("rng_log")) {
    err << "replay: exchange draws differ from the recorded rng log\n";
    same = false;
  }
  out << out_csv.string() << (same ? ": reproduces the recorded run\n" : ": DIFFERS from the recorded run\n");
  return same ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Moment exchange experiments on 3-stage residual networks"};
  app.require_subcommand(1);

  SpecFlags train_flags, ablate_flags, dump_flags, synth_flags;
  std::filesystem::path train_out = "metrics.csv", train_ckpt;
  auto* train = app.add_subcommand("train", "Train one network; writes CSV, JSON sidecar and checkpoint");
  add_spec_flags(train, train_flags);
  train->add_option("--out", train_out, "Metrics CSV path (sidecar and checkpoint are written beside it)");
  train->add_option("--checkpoint", train_ckpt, "Checkpoint path (default: <out>.ckpt)");

  AblateFlags ablate_axes;
  std::filesystem::path ablate_out = "ablation.csv";
  auto* ablate = app.add_subcommand("ablate", "Sweep a grid of configurations over shared seeds");
  add_spec_flags(ablate, ablate_flags);
  ablate->add_option("--out", ablate_out, "Aggregate CSV path");
  ablate->add_option("--preset", ablate_axes.preset, "Named grid")
      ->check(CLI::IsMember({"losses", "lambda-p", "schemes", "layers"}));
  ablate_axes.axis_options = {
      ablate->add_option("--losses", ablate_axes.losses, "Loss-mode axis")->delimiter(',')->expected(0, -1),
      ablate->add_option("--lambdas", ablate_axes.lambdas, "Lambda axis")->delimiter(',')->expected(0, -1),
      ablate->add_option("--ps", ablate_axes.ps, "Exchange-probability axis")->delimiter(',')->expected(0, -1),
      ablate->add_option("--schemes", ablate_axes.schemes, "Normalization axis")->delimiter(',')->expected(0, -1),
      ablate->add_option("--inserts", ablate_axes.inserts, "Insertion-point axis")->delimiter(',')->expected(0, -1),
      ablate->add_option("--modes", ablate_axes.modes, "Exchange-mode axis")->delimiter(',')->expected(0, -1),
      ablate->add_option("--augs", ablate_axes.augs, "Pixel-augmentation axis")->delimiter(',')->expected(0, -1),
  };
  ablate->add_option("--seeds", ablate_axes.seeds, "Seeds shared by every cell")->delimiter(',');
  ablate->add_option("--runs-dir", ablate_axes.runs_dir, "Directory for per-run CSVs and sidecars");

  std::uint64_t gc_seed = 1;
  double gc_tol = kGradCheckTolerance;
  bool gc_skip_network = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", gc_seed, "Seed for the random inputs");
  gradcheck->add_option("--tol", gc_tol, "Maximum relative error")->check(CLI::PositiveNumber);
  gradcheck->add_flag("--skip-network", gc_skip_network, "Only check primitives");

  std::filesystem::path dump_image, dump_ckpt, dump_dir = ".";
  long dump_index = -1;
  std::string dump_layer = "input";
  auto* dump = app.add_subcommand("dump-moments", "Write PONO mean and std maps as P5 graymaps");
  add_data_flags(dump, dump_flags);
  dump->add_option("--image", dump_image, "Input P5/P6 image");
  dump->add_option("--index", dump_index, "Training-set image index (uses the --data flags)");
  dump->add_option("--layer", dump_layer, "Features to decompose")->check(CLI::IsMember({"input", "stem"}));
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint supplying the stem weights");
  dump->add_option("--n-blocks", dump_flags.spec.model.blocks_per_stage, "Blocks per stage of the checkpointed model");
  dump->add_option("--seed", dump_flags.spec.train.seed, "Initialization seed when no checkpoint is given");
  dump->add_option("--out-dir", dump_dir, "Output directory");

  std::filesystem::path synth_dir = "synth";
  auto* synth = app.add_subcommand("synth-data", "Write the synthetic dataset in CIFAR-10 binary format");
  add_data_flags(synth, synth_flags);
  synth->add_option("--out-dir", synth_dir, "Output directory (train.bin, test.bin)");

  std::filesystem::path replay_sidecar, replay_out;
  auto* replay = app.add_subcommand("replay", "Re-run a recorded experiment from its JSON sidecar");
  replay->add_option("--sidecar", replay_sidecar, "Run sidecar (.json)")->required();
  replay->add_option("--out", replay_out, "Metrics CSV path (default: <sidecar>.replay.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_flags, train_out, train_ckpt, out);
    if (*ablate) return cmd_ablate(ablate_flags, ablate_axes, ablate_out, out);
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_tol, gc_skip_network, out);
    if (*dump) return cmd_dump_moments(dump_flags, dump_image, dump_index, dump_layer, dump_ckpt, dump_dir, out);
    if (*synth) return cmd_synth_data(synth_flags, synth_dir, out);
    if (*replay) return cmd_replay(replay_sidecar, replay_out, out, err);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::runtime_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitFailure;
}

}  // namespace moex
