#pragma once

// Experiment specs, their JSON sidecars, single runs and ablation sweeps.

#include "moex/data.hpp"
#include "moex/model.hpp"
#include "moex/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace moex {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitDiverged = 3 };

/// Anything the user must fix in flags or inputs (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSpec {
  std::string source = "synth";  // synth | cifar10
  std::filesystem::path path;    // CIFAR-10 binary directory
  Index subset = 5000;           // training images kept from CIFAR-10; 0 keeps all
  std::uint64_t seed = 7;        // CIFAR subset draw, synthetic templates and noise
  SynthConfig synth;             // seed and split are set per split
  Index synth_test_per_class = 50;
};

struct ExperimentSpec {
  DataSpec data;
  ResNetConfig model;
  TrainConfig train;
  bool double_precision = false;
  /// Standardization constants; computed from the training split when absent.
  std::optional<ChannelStats> stats;

  void validate() const;
};

nlohmann::json to_json(const ExperimentSpec& spec);
ExperimentSpec spec_from_json(const nlohmann::json& j);

struct LoadedData {
  ImageDataset train, test;
  ChannelStats stats;
};

/// Loads or generates both splits and fills spec.stats when unset.
LoadedData load_data(ExperimentSpec& spec);

struct RunOutcome {
  std::vector<MetricsRow> history;
  std::vector<RngLogEntry> rng_log;
};

/// Destinations for one run; empty paths are skipped.
struct RunOutputs {
  std::filesystem::path csv, sidecar, checkpoint;
};

/// `run.csv` -> `run.json`.
std::filesystem::path sidecar_path_for(const std::filesystem::path& csv);

/// Trains, streaming CSV rows as epochs finish, then writes the sidecar and checkpoint.
/// Throws DivergenceError on a non-finite loss.
RunOutcome run_experiment(const ExperimentSpec& spec, const LoadedData& data, const RunOutputs& out,
                          std::ostream* progress = nullptr);

nlohmann::json sidecar_json(const ExperimentSpec& spec, const RunOutcome& run);

// ---------------------------------------------------------------------------
// Ablation sweeps

struct AblationCell {
  LossMode loss = LossMode::Plain;
  MoExConfig moex;  // unused by plain and smooth, except lambda for smooth
  PixelAugment augment = PixelAugment::CropFlip;
};

struct AblationGrid {
  std::vector<LossMode> losses;
  std::vector<double> lambdas, ps;
  std::vector<NormScheme> schemes;
  std::vector<InsertionPoint> inserts;
  std::vector<ExchangeMode> modes;
  std::vector<PixelAugment> augments;

  bool any_axis() const;
};

/// Cross product of the given axes; axes left empty take the base value.
/// Returns nothing when no axis was given.
std::vector<AblationCell> expand_grid(const AblationGrid& grid, const ExperimentSpec& base);

/// Named cell lists mirroring the published ablations:
/// losses (label smoothing / interpolation only / lambda = 1 / MoEx),
/// lambda-p (lambda in {0.6..0.9} x p in {0.25..1}), schemes, layers.
std::vector<AblationCell> preset_cells(std::string_view preset, const ExperimentSpec& base);

/// Applies a cell to a copy of the base spec.
ExperimentSpec apply_cell(const ExperimentSpec& base, const AblationCell& cell, std::uint64_t seed);

struct CellSummary {
  AblationCell cell;
  std::vector<double> test_errors;  // final-epoch test error per successful seed
  std::vector<std::string> failures;
};

double mean_of(const std::vector<double>& v);
/// Sample standard deviation (n - 1) over sqrt(n); NaN below two values.
double standard_error(const std::vector<double>& v);

std::string ablation_csv_header();
std::string format_ablation_row(std::size_t index, const CellSummary& s);

/// Runs every cell for every seed (shared across cells) and writes the
/// aggregate CSV. Cell failures are recorded and the sweep continues.
std::vector<CellSummary> run_ablation(const ExperimentSpec& base, const std::vector<AblationCell>& cells,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_csv,
                                      const std::filesystem::path& runs_dir, std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------
// Command-line entry point

/// Parses argv and runs one command; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace moex
