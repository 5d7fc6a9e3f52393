#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bsbi/diagnostics.hpp"
#include "bsbi/training.hpp"

namespace bsbi {

/// Overrides the configured output directory when set.
inline constexpr const char* kOutputRootEnv = "BSBI_OUTPUT_ROOT";

struct ExperimentConfig {
  std::vector<std::string> tasks;
  std::vector<Algorithm> algorithms;
  std::vector<std::uint64_t> budgets;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output;
  TrainConfig train;
  ModelConfig model;
  DiagnosticsOptions diagnostics;
  std::size_t test_size = kDefaultTestSize;

  /// Throws std::invalid_argument on empty axes, unknown tasks, budgets that
  /// are not ascending powers of two, or invalid training settings.
  void validate() const;
  /// Canonical text of every setting except the output directory.
  std::string canonical() const;
  std::uint64_t hash() const;
};

/// Parses an INI file with [sweep], [train], [model] and [diagnostics]
/// sections. Unknown keys are rejected.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(const std::string& text);

struct RunKey {
  std::string task;
  Algorithm algorithm = Algorithm::NRE;
  std::uint64_t budget = 0;
  std::uint64_t seed = 0;

  /// task/algorithm/b<budget>/s<seed>
  std::filesystem::path relative_dir() const;
  std::string label() const;
};

enum class RunStatus { Pending, Done, Failed };
std::string status_name(RunStatus s);

struct RunEntry {
  RunKey key;
  RunStatus status = RunStatus::Pending;
  std::string error;
};

struct RunManifest {
  std::uint64_t config_hash = 0;
  std::filesystem::path output;
  std::vector<RunEntry> runs;

  static RunManifest load(const std::filesystem::path& path);
  /// Whole-file replace.
  void save(const std::filesystem::path& path) const;
  std::size_t count(RunStatus s) const;
};

/// Every (task, algorithm, budget, seed) cell in sweep order.
std::vector<RunKey> expand_runs(const ExperimentConfig& config);

struct SweepOptions {
  std::size_t jobs = 1;
  /// Require an existing manifest with a matching config hash.
  bool resume = false;
  /// Called after each finished run (from worker threads, serialized).
  std::function<void(const RunEntry&)> on_run;
};

/// Runs every pending or failed cell, skipping cells already done, then
/// writes the aggregated metrics.csv, summary.csv and coverage_median.csv.
RunManifest run_sweep(const ExperimentConfig& config, const SweepOptions& options = {});

/// Trains and evaluates one cell, writing its artifacts into `dir`.
void run_single(const ExperimentConfig& config, const RunKey& key, const std::filesystem::path& dir);

/// Writes plot_coverage.csv, plot_balancing_error.csv and
/// plot_nominal_log_posterior.csv next to the manifest. Throws
/// std::runtime_error listing every cell whose artifacts are missing.
void export_plotdata(const std::filesystem::path& manifest_path);

/// Median of a non-empty sample (mean of the two middle values for even n).
double median(std::vector<double> values);

/// Number formatting used by every CSV.
std::string format_number(double v);

std::string coverage_csv(const MetricRecord& rec);
std::string summary_csv(const MetricRecord& rec);

}  // namespace bsbi
