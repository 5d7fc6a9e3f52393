#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "bsbi/binary_io.hpp"
#include "bsbi/harness.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bsbi;
namespace fs = std::filesystem;

namespace {

const char* kSmallSweep = R"(
[sweep]
tasks = gaussian_linear
algorithms = NPE, BNPE
budgets = 256
seeds = 0, 1, 2, 3, 4
test_size = 100

[train]
max_epochs = 3
batch = 64

[model]
classifier_hidden = 16
classifier_layers = 3
flow_transforms = 2
flow_hidden = 16
flow_conditioner_layers = 2

[diagnostics]
samples = 64
coverage_pairs = 40
log_posterior_pairs = 20
grid_resolution = 64
)";

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> rows(const fs::path& p) {
  std::vector<std::vector<std::string>> out;
  std::istringstream is(read(p));
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    out.push_back(fields);
  }
  return out;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("bsbi_test_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c = parse_experiment_config(kSmallSweep);
  c.output = out;
  return c;
}

std::string with(const std::string& base, const std::string& from, const std::string& to) {
  std::string s = base;
  const auto pos = s.find(from);
  REQUIRE(pos != std::string::npos);
  s.replace(pos, from.size(), to);
  return s;
}

}  // namespace

TEST_CASE("experiment config parsing") {
  const ExperimentConfig c = parse_experiment_config(kSmallSweep);
  CHECK(c.tasks == std::vector<std::string>{"gaussian_linear"});
  CHECK(c.algorithms == std::vector<Algorithm>{Algorithm::NPE, Algorithm::BNPE});
  CHECK(c.budgets == std::vector<std::uint64_t>{256});
  CHECK(c.seeds.size() == 5);
  CHECK(c.train.max_epochs == 3);
  CHECK(c.train.lambda == 100.0);
  CHECK(c.model.flow_hidden == 16);
  CHECK(c.diagnostics.grid_resolution == 64);
  CHECK(c.diagnostics.rank.grid_resolution == 64);
  CHECK(c.diagnostics.rank.tie == TieBreak::Strict);
  CHECK(c.output == "runs");

  CHECK(parse_experiment_config(with(kSmallSweep, "[diagnostics]", "[diagnostics]\ntie_break = randomized"))
            .diagnostics.rank.tie == TieBreak::Randomized);

  const std::vector<std::pair<std::string, std::string>> bad = {
      {"max_epochs = 3", "max_epochs = 3\nepochs = 4"},
      {"budgets = 256", "budgets = 300"},
      {"budgets = 256", "budgets = 512, 256"},
      {"budgets = 256", "budgets = 32"},
      {"tasks = gaussian_linear", "tasks = lotka_volterra"},
      {"algorithms = NPE, BNPE", "algorithms = NPE, SNPE"},
      {"max_epochs = 3", "max_epochs = 3\nlambda = 0"},
      {"max_epochs = 3", "max_epochs = three"},
      {"grid_resolution = 64", "grid_resolution = 32"},
      {"grid_resolution = 64", "grid_resolution = 64\ntie_break = sometimes"},
      {"seeds = 0, 1, 2, 3, 4", "seeds = 0, 1, 1"},
      {"seeds = 0, 1, 2, 3, 4", "seeds = -1"},
      {"test_size = 100", "test_size = 10"},
      {"[sweep]", "stray = 1\n[sweep]"},
  };
  for (const auto& [from, to] : bad) {
    CAPTURE(to);
    CHECK_THROWS_AS(parse_experiment_config(with(kSmallSweep, from, to)), std::invalid_argument);
  }
  CHECK_THROWS_AS(parse_experiment_config("[sweep]\ntasks = two_moons\n"), std::invalid_argument);
}

TEST_CASE("config hash ignores the output directory") {
  ExperimentConfig a = parse_experiment_config(kSmallSweep);
  ExperimentConfig b = a;
  b.output = "/elsewhere";
  CHECK(a.hash() == b.hash());
  b.train.lambda = 10.0;
  CHECK(a.hash() != b.hash());
  b = a;
  b.seeds.push_back(9);
  CHECK(a.hash() != b.hash());
}

TEST_CASE("sweep expansion") {
  const ExperimentConfig c = parse_experiment_config(kSmallSweep);
  const auto keys = expand_runs(c);
  REQUIRE(keys.size() == 10);
  CHECK(keys[0].label() == "gaussian_linear/NPE/b256/s0");
  CHECK(keys[9].label() == "gaussian_linear/BNPE/b256/s4");
  CHECK(keys[5].relative_dir() == fs::path("gaussian_linear/BNPE/b256/s0"));
}

TEST_CASE("median and number format") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(median({}), std::invalid_argument);
  CHECK(format_number(0.05) == "0.05");
  CHECK(format_number(-1.2283905) == "-1.2283905");
  CHECK(format_number(1.0 / 3.0) == "0.3333333333");
}

TEST_CASE("sweep writes artifacts, aggregates and resumes idempotently") {
  TempDir tmp("sweep");
  const ExperimentConfig c = small_config(tmp.path);
  std::size_t calls = 0;
  SweepOptions opts;
  opts.jobs = 2;
  opts.on_run = [&](const RunEntry&) { ++calls; };
  const RunManifest m = run_sweep(c, opts);
  CHECK(calls == 10);
  CHECK(m.count(RunStatus::Done) == 10);

  for (const auto& run : m.runs) {
    const fs::path dir = tmp.path / run.key.relative_dir();
    CHECK(fs::exists(dir / "checkpoint.bin"));
    CHECK(rows(dir / "train_log.csv").size() == 3);
    CHECK(rows(dir / "coverage.csv").size() == 19);
    CHECK(rows(dir / "summary.csv").size() == 1);
  }
  CHECK(rows(tmp.path / "summary.csv").size() == 10);
  CHECK(rows(tmp.path / "metrics.csv").size() == 190);

  // Median over seeds recomputed from the per-run files.
  std::map<std::pair<std::string, std::string>, std::vector<double>> by_level;
  for (const auto& run : m.runs) {
    for (const auto& r : rows(tmp.path / run.key.relative_dir() / "coverage.csv")) {
      by_level[{r[0], r[4]}].push_back(std::stod(r[5]));
    }
  }
  const auto medians = rows(tmp.path / "coverage_median.csv");
  CHECK(medians.size() == 38);
  for (const auto& r : medians) {
    auto v = by_level.at({r[0], r[3]});
    REQUIRE(v.size() == 5);
    std::sort(v.begin(), v.end());
    CHECK(std::stod(r[4]) == doctest::Approx(v[2]).epsilon(1e-9));
  }

  const std::string before = read(tmp.path / "manifest.json");
  const auto stamp = fs::last_write_time(tmp.path / "gaussian_linear/NPE/b256/s0/checkpoint.bin");
  calls = 0;
  opts.resume = true;
  const RunManifest again = run_sweep(c, opts);
  CHECK(calls == 0);
  CHECK(again.count(RunStatus::Done) == 10);
  CHECK(read(tmp.path / "manifest.json") == before);
  CHECK(fs::last_write_time(tmp.path / "gaussian_linear/NPE/b256/s0/checkpoint.bin") == stamp);

  ExperimentConfig changed = c;
  changed.train.max_epochs = 4;
  CHECK_THROWS_AS(run_sweep(changed), std::runtime_error);

  // Plot export.
  export_plotdata(tmp.path / "manifest.json");
  const auto cov = rows(tmp.path / "plot_coverage.csv");
  CHECK(cov.size() == 38);
  for (const auto& r : cov) {
    CHECK(std::stod(r[5]) <= std::stod(r[4]));
    CHECK(std::stod(r[4]) <= std::stod(r[6]));
  }
  std::map<std::string, std::vector<double>> nlp;
  for (const auto& r : rows(tmp.path / "summary.csv")) nlp[r[0]].push_back(std::stod(r[5]));
  for (const auto& r : rows(tmp.path / "plot_nominal_log_posterior.csv")) {
    auto v = nlp.at(r[1]);
    std::sort(v.begin(), v.end());
    CHECK(std::stod(r[3]) == doctest::Approx(v[2]).epsilon(1e-9));
    CHECK(std::stod(r[4]) == doctest::Approx(v.front()).epsilon(1e-9));
    CHECK(std::stod(r[5]) == doctest::Approx(v.back()).epsilon(1e-9));
  }
  CHECK(rows(tmp.path / "plot_balancing_error.csv").size() == 2);

  fs::remove(tmp.path / "gaussian_linear/BNPE/b256/s3/summary.csv");
  try {
    export_plotdata(tmp.path / "manifest.json");
    FAIL("expected a missing-cell error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("gaussian_linear/BNPE/b256/s3") != std::string::npos);
  }
}

TEST_CASE("resume requires a manifest") {
  TempDir tmp("resume");
  SweepOptions opts;
  opts.resume = true;
  CHECK_THROWS_AS(run_sweep(small_config(tmp.path), opts), std::runtime_error);
}

TEST_CASE("failed runs are recorded and the sweep continues") {
  TempDir tmp("failed");
  ExperimentConfig c = small_config(tmp.path);
  c.algorithms = {Algorithm::NRE, Algorithm::NREC};
  c.budgets = {64};
  c.seeds = {0};
  c.train.K = 6;
  const RunManifest m = run_sweep(c);
  REQUIRE(m.runs.size() == 2);
  CHECK(m.runs[0].status == RunStatus::Done);
  CHECK(m.runs[1].status == RunStatus::Failed);
  CHECK(m.runs[1].error.find("too small") != std::string::npos);
  CHECK(RunManifest::load(tmp.path / "manifest.json").count(RunStatus::Failed) == 1);
  CHECK(rows(tmp.path / "summary.csv").size() == 1);
  CHECK_THROWS_WITH_AS(export_plotdata(tmp.path / "manifest.json"), doctest::Contains("gaussian_linear/NRE-C/b64/s0"),
                       std::runtime_error);

  std::size_t calls = 0;
  SweepOptions opts;
  opts.on_run = [&](const RunEntry&) { ++calls; };
  run_sweep(c, opts);
  CHECK(calls == 1);
}

TEST_CASE("output root override") {
  TempDir tmp("override");
  ExperimentConfig c = small_config("/nonexistent/should/not/be/used");
  c.algorithms = {Algorithm::NRE};
  c.seeds = {0};
  ::setenv(kOutputRootEnv, tmp.path.c_str(), 1);
  const RunManifest m = run_sweep(c);
  ::unsetenv(kOutputRootEnv);
  CHECK(m.count(RunStatus::Done) == 1);
  CHECK(fs::exists(tmp.path / "manifest.json"));
  CHECK(fs::exists(tmp.path / "datasets" / "gaussian_linear_b256_s0.bin"));
}

TEST_CASE("identical configs give byte-identical metrics") {
  TempDir a("det_a"), b("det_b");
  ExperimentConfig c = small_config(a.path);
  c.algorithms = {Algorithm::BNRE, Algorithm::BNPEInit};
  c.seeds = {0, 1};
  SweepOptions serial;
  run_sweep(c, serial);
  c.output = b.path;
  SweepOptions parallel;
  parallel.jobs = 3;
  run_sweep(c, parallel);
  for (const char* f : {"metrics.csv", "summary.csv", "coverage_median.csv"}) {
    CAPTURE(f);
    CHECK(read(a.path / f) == read(b.path / f));
  }
  CHECK(read(a.path / "gaussian_linear/BNRE/b256/s1/train_log.csv") ==
        read(b.path / "gaussian_linear/BNRE/b256/s1/train_log.csv"));
}

TEST_CASE("checkpoint round trip") {
  TempDir tmp("ckpt");
  fs::create_directories(tmp.path);
  ModelConfig model;
  model.classifier_hidden = 16;
  model.classifier_layers = 3;
  model.flow_transforms = 2;
  model.flow_hidden = 16;
  model.flow_conditioner_layers = 2;
  for (const std::string name : {"two_moons", "gaussian_linear", "slcp"}) {
    const TaskDefinition task = make_task(name);
    Rng rng(31);
    const Split train = sample_joint_split(task, 300, rng);
    Split probe = sample_joint_split(task, 100, rng);
    for (const Algorithm alg : {Algorithm::NRE, Algorithm::BNPE}) {
      CAPTURE(name);
      CAPTURE(algorithm_name(alg));
      auto s = make_surrogate(alg, task, model, train, rng);
      // Perturb every parameter so the output layer is not trivially zero.
      for (Parameter* p : trainable_parameters(*s)) {
        for (double& v : p->value.data()) v += rng.normal(0.0, 0.05);
      }
      const fs::path path = tmp.path / (name + algorithm_name(alg) + ".bin");
      save_checkpoint(path, *s, name);
      const LoadedCheckpoint loaded = load_checkpoint(path);
      CHECK(loaded.task == name);
      CHECK(loaded.surrogate->kind() == s->kind());
      const auto want = s->log_unnorm(probe.theta, probe.x);
      const auto got = loaded.surrogate->log_unnorm(probe.theta, probe.x);
      double worst = 0.0;
      for (std::size_t i = 0; i < 100; ++i) worst = std::max(worst, std::abs(want[i] - got[i]));
      CHECK(worst == 0.0);
      CHECK(want == got);
    }
  }

  const fs::path good = tmp.path / "two_moonsNRE.bin";
  std::string bytes = read(good);
  std::string corrupt = bytes;
  corrupt[0] ^= 0x5a;
  std::ofstream(tmp.path / "corrupt.bin", std::ios::binary) << corrupt;
  CHECK_THROWS_AS(load_checkpoint(tmp.path / "corrupt.bin"), FormatError);
  std::ofstream(tmp.path / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(tmp.path / "short.bin"), FormatError);
  CHECK_THROWS(load_checkpoint(tmp.path / "absent.bin"));
}

TEST_CASE("a balanced flow checkpoint supports diagnostics alone") {
  TempDir tmp("bnpe");
  ExperimentConfig c = small_config(tmp.path);
  c.algorithms = {Algorithm::BNPE};
  c.seeds = {2};
  run_sweep(c);
  const fs::path dir = tmp.path / "gaussian_linear/BNPE/b256/s2";
  const LoadedCheckpoint ck = load_checkpoint(dir / "checkpoint.bin");
  REQUIRE(ck.task == "gaussian_linear");
  CHECK(ck.surrogate->sampleable());

  // Same data and diagnostic stream as the run itself reproduce its summary.
  const TaskDefinition task = make_task(ck.task);
  const Dataset data = generate_dataset(task, 256, 2, c.test_size);
  MetricRecord rec = run_diagnostics(*ck.surrogate, task, data.test, c.diagnostics, Rng(2).split(Stream::Diagnostics));
  rec.algorithm = "BNPE";
  rec.budget = 256;
  rec.seed = 2;
  CHECK(summary_csv(rec) == read(dir / "summary.csv"));
  CHECK(coverage_csv(rec) == read(dir / "coverage.csv"));
}
