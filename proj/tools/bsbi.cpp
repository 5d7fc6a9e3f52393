// Command-line front end: sweep runner, plot-data export and
// diagnostics-only evaluation of a saved checkpoint.

#include <iostream>

#include "CLI11.hpp"
#include "bsbi/harness.hpp"

namespace {

int run_command(const std::string& config_path, std::size_t jobs, bool resume) {
  const bsbi::ExperimentConfig config = bsbi::load_experiment_config(config_path);
  bsbi::SweepOptions opts;
  opts.jobs = jobs;
  opts.resume = resume;
  opts.on_run = [](const bsbi::RunEntry& e) {
    std::cerr << bsbi::status_name(e.status) << "  " << e.key.label();
    if (!e.error.empty()) std::cerr << "  (" << e.error << ")";
    std::cerr << "\n";
  };
  const bsbi::RunManifest m = bsbi::run_sweep(config, opts);
  std::cout << "done " << m.count(bsbi::RunStatus::Done) << ", failed " << m.count(bsbi::RunStatus::Failed)
            << ", output " << m.output.string() << "\n";
  return m.count(bsbi::RunStatus::Failed) == 0 ? 0 : 1;
}

int diagnose_command(const std::string& checkpoint, const std::string& task_name, std::size_t pairs,
                     std::size_t samples, std::uint64_t seed, std::size_t grid, const std::string& tie) {
  const bsbi::LoadedCheckpoint ck = bsbi::load_checkpoint(checkpoint);
  if (ck.task != task_name) {
    throw std::invalid_argument("checkpoint was trained on '" + ck.task + "', not '" + task_name + "'");
  }
  const bsbi::TaskDefinition task = bsbi::make_task(task_name);
  bsbi::Rng test_rng = bsbi::Rng(seed).split(bsbi::Stream::TestSet);
  const bsbi::Split test = bsbi::sample_joint_split(task, pairs, test_rng);

  bsbi::DiagnosticsOptions opts;
  opts.rank.samples = samples;
  opts.rank.grid_resolution = grid;
  opts.rank.tie = tie == "randomized" ? bsbi::TieBreak::Randomized : bsbi::TieBreak::Strict;
  opts.grid_resolution = grid;
  bsbi::MetricRecord rec =
      bsbi::run_diagnostics(*ck.surrogate, task, test, opts, bsbi::Rng(seed).split(bsbi::Stream::Diagnostics));
  rec.algorithm = ck.surrogate->kind() == bsbi::SurrogateDensity::Kind::FlowBased ? "flow" : "ratio";
  rec.seed = seed;
  std::cout << bsbi::coverage_csv(rec) << "\n" << bsbi::summary_csv(rec);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Balance-regularized simulation-based inference"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run a sweep described by a config file");
  std::string config_path;
  std::size_t jobs = 1;
  bool resume = false;
  run->add_option("--config", config_path, "INI sweep configuration")->required()->check(CLI::ExistingFile);
  run->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);
  run->add_flag("--resume", resume, "Continue an existing manifest");

  auto* exp = app.add_subcommand("export", "Write plot CSVs from a finished sweep");
  std::string manifest;
  exp->add_option("--manifest", manifest, "manifest.json of the sweep")->required()->check(CLI::ExistingFile);

  auto* diag = app.add_subcommand("diagnose", "Evaluate a saved checkpoint");
  std::string checkpoint;
  std::string task;
  std::size_t pairs = 1000;
  std::size_t samples = bsbi::kDefaultPosteriorSamples;
  std::uint64_t seed = 0;
  std::size_t grid = bsbi::kDefaultGridResolution;
  std::string tie = "strict";
  diag->add_option("--checkpoint", checkpoint, "checkpoint.bin")->required()->check(CLI::ExistingFile);
  diag->add_option("--task", task, "Task the checkpoint was trained on")->required();
  diag->add_option("--pairs", pairs, "Test pairs")->check(CLI::PositiveNumber);
  diag->add_option("--samples", samples, "Posterior samples per pair")->check(CLI::PositiveNumber);
  diag->add_option("--seed", seed, "Seed of the test set");
  diag->add_option("--grid", grid, "Grid resolution for ratio surrogates");
  diag->add_option("--tie", tie, "Rank tie-break")->check(CLI::IsMember({"strict", "randomized"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return run_command(config_path, jobs, resume);
    if (*exp) {
      bsbi::export_plotdata(manifest);
      return 0;
    }
    if (*diag) return diagnose_command(checkpoint, task, pairs, samples, seed, grid, tie);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
