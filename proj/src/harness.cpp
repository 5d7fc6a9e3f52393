#include "bsbi/harness.hpp"

#include <algorithm>
#include <atomic>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "bsbi/binary_io.hpp"
#include "json.hpp"

namespace bsbi {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::mutex dataset_mutex;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::vector<std::string> list_of(const std::string& s) {
  std::vector<std::string> out;
  for (const auto& item : split(s, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v[0] == '-') {
    throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a number");
  return out;
}

fs::path resolved_output(const ExperimentConfig& config) {
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root);
  return config.output;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Data rows of a CSV file (header dropped), each split into fields.
std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::istringstream is(text);
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (!line.empty()) out.push_back(split(line, ','));
  }
  return out;
}

std::string csv_body(const std::string& text) {
  const auto nl = text.find('\n');
  return nl == std::string::npos ? "" : text.substr(nl + 1);
}

constexpr const char* kCoverageHeader = "algorithm,task,budget,seed,level,coverage\n";
constexpr const char* kSummaryHeader = "algorithm,task,budget,seed,balancing_error,nominal_log_posterior\n";

fs::path dataset_path(const fs::path& out, const RunKey& key) {
  return out / "datasets" / (key.task + "_b" + std::to_string(key.budget) + "_s" + std::to_string(key.seed) + ".bin");
}

struct CellKey {
  std::string task;
  std::string algorithm;
  std::uint64_t budget;
  auto operator<=>(const CellKey&) const = default;
};

struct CellData {
  std::map<double, std::vector<double>> coverage;
  std::vector<double> balancing_error;
  std::vector<double> nominal_log_posterior;
};

void collect_run(const fs::path& dir, CellData& cell) {
  for (const auto& row : csv_rows(read_text(dir / "coverage.csv"))) {
    if (row.size() != 6) throw std::runtime_error("malformed coverage row in " + dir.string());
    cell.coverage[std::stod(row[4])].push_back(std::stod(row[5]));
  }
  for (const auto& row : csv_rows(read_text(dir / "summary.csv"))) {
    if (row.size() != 6) throw std::runtime_error("malformed summary row in " + dir.string());
    cell.balancing_error.push_back(std::stod(row[4]));
    cell.nominal_log_posterior.push_back(std::stod(row[5]));
  }
}

std::string median_min_max(const std::vector<double>& v) {
  return format_number(median(v)) + "," + format_number(*std::min_element(v.begin(), v.end())) + "," +
         format_number(*std::max_element(v.begin(), v.end()));
}

void write_aggregates(const fs::path& out, const RunManifest& manifest) {
  std::string metrics = kCoverageHeader;
  std::string summary = kSummaryHeader;
  std::map<CellKey, CellData> cells;
  std::vector<CellKey> order;
  for (const auto& run : manifest.runs) {
    if (run.status != RunStatus::Done) continue;
    const fs::path dir = out / run.key.relative_dir();
    metrics += csv_body(read_text(dir / "coverage.csv"));
    summary += csv_body(read_text(dir / "summary.csv"));
    const CellKey ck{run.key.task, algorithm_name(run.key.algorithm), run.key.budget};
    if (!cells.count(ck)) order.push_back(ck);
    collect_run(dir, cells[ck]);
  }
  std::string medians = "algorithm,task,budget,level,median_coverage\n";
  for (const auto& ck : order) {
    for (const auto& [level, values] : cells[ck].coverage) {
      medians += ck.algorithm + "," + ck.task + "," + std::to_string(ck.budget) + "," + format_number(level) + "," +
                 format_number(median(values)) + "\n";
    }
  }
  replace_file(out / "metrics.csv", metrics);
  replace_file(out / "summary.csv", summary);
  replace_file(out / "coverage_median.csv", medians);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  if (tasks.empty()) throw std::invalid_argument("config: no tasks");
  if (algorithms.empty()) throw std::invalid_argument("config: no algorithms");
  if (budgets.empty()) throw std::invalid_argument("config: no budgets");
  if (seeds.empty()) throw std::invalid_argument("config: no seeds");
  const auto names = task_names();
  for (const auto& t : tasks) {
    if (std::find(names.begin(), names.end(), t) == names.end()) {
      throw std::invalid_argument("config: unknown task '" + t + "'");
    }
  }
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    const auto b = budgets[i];
    if (b < kMinBudget || (b & (b - 1)) != 0) {
      throw std::invalid_argument("config: budget " + std::to_string(b) + " is not a power of two >= " +
                                  std::to_string(kMinBudget));
    }
    if (i > 0 && !(b > budgets[i - 1])) throw std::invalid_argument("config: budgets must be strictly ascending");
  }
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw std::invalid_argument("config: duplicate seeds");
  }
  for (Algorithm a : algorithms) {
    TrainConfig t = train;
    t.algorithm = a;
    t.validate();
  }
  if (diagnostics.rank.samples == 0) throw std::invalid_argument("config: diagnostics samples must be positive");
  if (diagnostics.grid_resolution < kMinGridResolution) {
    throw std::invalid_argument("config: grid_resolution below " + std::to_string(kMinGridResolution));
  }
  if (test_size < 100) throw std::invalid_argument("config: test_size must be at least 100");
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  os << "tasks=";
  for (const auto& t : tasks) os << t << ';';
  os << "\nalgorithms=";
  for (Algorithm a : algorithms) os << algorithm_name(a) << ';';
  os << "\nbudgets=";
  for (auto b : budgets) os << b << ';';
  os << "\nseeds=";
  for (auto s : seeds) os << s << ';';
  os << "\ntest_size=" << test_size;
  os << "\ntrain=" << format_number(train.lambda) << ';' << format_number(train.gamma) << ';' << train.K << ';'
     << format_number(train.lr) << ';' << train.batch << ';' << train.max_epochs << ';' << train.patience << ';'
     << format_number(train.lr_factor) << ';' << format_number(train.min_lr);
  os << "\nmodel=" << model.classifier_hidden << ';' << model.classifier_layers << ';' << model.flow_transforms << ';'
     << model.flow_hidden << ';' << model.flow_conditioner_layers << ';' << model.spline.bins << ';'
     << format_number(model.spline.bound) << ';' << format_number(model.spline.min_bin_fraction);
  os << "\ndiagnostics=" << diagnostics.rank.samples << ';'
     << (diagnostics.rank.tie == TieBreak::Strict ? "strict" : "randomized") << ';' << diagnostics.coverage_pairs
     << ';' << diagnostics.log_posterior_pairs << ';' << diagnostics.grid_resolution << '\n';
  return os.str();
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a(canonical()); }

ExperimentConfig parse_experiment_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }

  ExperimentConfig c;
  c.diagnostics.grid_resolution = kDefaultGridResolution;
  c.diagnostics.rank.grid_resolution = kDefaultGridResolution;
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
      {"sweep.tasks", [&](auto&, auto& v) { c.tasks = list_of(v); }},
      {"sweep.algorithms",
       [&](auto&, auto& v) {
         c.algorithms.clear();
         for (const auto& a : list_of(v)) c.algorithms.push_back(parse_algorithm(a));
       }},
      {"sweep.budgets",
       [&](auto& k, auto& v) {
         c.budgets.clear();
         for (const auto& b : list_of(v)) c.budgets.push_back(parse_u64(k, b));
       }},
      {"sweep.seeds",
       [&](auto& k, auto& v) {
         c.seeds.clear();
         for (const auto& s : list_of(v)) c.seeds.push_back(parse_u64(k, s));
       }},
      {"sweep.output", [&](auto&, auto& v) { c.output = v; }},
      {"sweep.test_size", [&](auto& k, auto& v) { c.test_size = parse_u64(k, v); }},
      {"train.lambda", [&](auto& k, auto& v) { c.train.lambda = parse_double(k, v); }},
      {"train.gamma", [&](auto& k, auto& v) { c.train.gamma = parse_double(k, v); }},
      {"train.K", [&](auto& k, auto& v) { c.train.K = parse_u64(k, v); }},
      {"train.lr", [&](auto& k, auto& v) { c.train.lr = parse_double(k, v); }},
      {"train.batch", [&](auto& k, auto& v) { c.train.batch = parse_u64(k, v); }},
      {"train.max_epochs", [&](auto& k, auto& v) { c.train.max_epochs = parse_u64(k, v); }},
      {"train.patience", [&](auto& k, auto& v) { c.train.patience = parse_u64(k, v); }},
      {"train.lr_factor", [&](auto& k, auto& v) { c.train.lr_factor = parse_double(k, v); }},
      {"train.min_lr", [&](auto& k, auto& v) { c.train.min_lr = parse_double(k, v); }},
      {"model.classifier_hidden", [&](auto& k, auto& v) { c.model.classifier_hidden = parse_u64(k, v); }},
      {"model.classifier_layers", [&](auto& k, auto& v) { c.model.classifier_layers = parse_u64(k, v); }},
      {"model.flow_transforms", [&](auto& k, auto& v) { c.model.flow_transforms = parse_u64(k, v); }},
      {"model.flow_hidden", [&](auto& k, auto& v) { c.model.flow_hidden = parse_u64(k, v); }},
      {"model.flow_conditioner_layers",
       [&](auto& k, auto& v) { c.model.flow_conditioner_layers = parse_u64(k, v); }},
      {"model.spline_bins", [&](auto& k, auto& v) { c.model.spline.bins = parse_u64(k, v); }},
      {"model.spline_bound", [&](auto& k, auto& v) { c.model.spline.bound = parse_double(k, v); }},
      {"diagnostics.samples", [&](auto& k, auto& v) { c.diagnostics.rank.samples = parse_u64(k, v); }},
      {"diagnostics.coverage_pairs", [&](auto& k, auto& v) { c.diagnostics.coverage_pairs = parse_u64(k, v); }},
      {"diagnostics.log_posterior_pairs",
       [&](auto& k, auto& v) { c.diagnostics.log_posterior_pairs = parse_u64(k, v); }},
      {"diagnostics.grid_resolution",
       [&](auto& k, auto& v) {
         c.diagnostics.grid_resolution = parse_u64(k, v);
         c.diagnostics.rank.grid_resolution = c.diagnostics.grid_resolution;
       }},
      {"diagnostics.tie_break",
       [&](auto& k, auto& v) {
         if (v == "strict") {
           c.diagnostics.rank.tie = TieBreak::Strict;
         } else if (v == "randomized") {
           c.diagnostics.rank.tie = TieBreak::Randomized;
         } else {
           throw std::invalid_argument("config key '" + k + "': expected strict or randomized");
         }
       }},
  };

  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw std::invalid_argument("config: key '" + section + "' outside a section");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto it = setters.find(full);
      if (it == setters.end()) throw std::invalid_argument("config: unknown key '" + full + "'");
      it->second(full, trim(value.data()));
    }
  }
  if (c.output.empty()) c.output = "runs";
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) { return parse_experiment_config(read_text(path)); }

// ---------------------------------------------------------------------------
// Manifest

fs::path RunKey::relative_dir() const {
  return fs::path(task) / algorithm_name(algorithm) / ("b" + std::to_string(budget)) / ("s" + std::to_string(seed));
}

std::string RunKey::label() const {
  return task + "/" + algorithm_name(algorithm) + "/b" + std::to_string(budget) + "/s" + std::to_string(seed);
}

std::string status_name(RunStatus s) {
  switch (s) {
    case RunStatus::Pending:
      return "pending";
    case RunStatus::Done:
      return "done";
    case RunStatus::Failed:
      return "failed";
  }
  return "pending";
}

namespace {

RunStatus parse_status(const std::string& s) {
  if (s == "pending") return RunStatus::Pending;
  if (s == "done") return RunStatus::Done;
  if (s == "failed") return RunStatus::Failed;
  throw std::runtime_error("manifest: unknown status '" + s + "'");
}

}  // namespace

RunManifest RunManifest::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
    RunManifest m;
    m.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    m.output = j.at("output").get<std::string>();
    for (const auto& r : j.at("runs")) {
      RunEntry e;
      e.key.task = r.at("task").get<std::string>();
      e.key.algorithm = parse_algorithm(r.at("algorithm").get<std::string>());
      e.key.budget = r.at("budget").get<std::uint64_t>();
      e.key.seed = r.at("seed").get<std::uint64_t>();
      e.status = parse_status(r.at("status").get<std::string>());
      e.error = r.value("error", "");
      m.runs.push_back(std::move(e));
    }
    return m;
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest '" + path.string() + "' is malformed: " + e.what());
  }
}

void RunManifest::save(const fs::path& path) const {
  json j;
  j["config_hash"] = hex64(config_hash);
  j["output"] = output.string();
  j["runs"] = json::array();
  for (const auto& e : runs) {
    const fs::path dir = e.key.relative_dir();
    j["runs"].push_back({{"task", e.key.task},
                         {"algorithm", algorithm_name(e.key.algorithm)},
                         {"budget", e.key.budget},
                         {"seed", e.key.seed},
                         {"status", status_name(e.status)},
                         {"error", e.error},
                         {"artifacts",
                          {{"checkpoint", (dir / "checkpoint.bin").generic_string()},
                           {"train_log", (dir / "train_log.csv").generic_string()},
                           {"coverage", (dir / "coverage.csv").generic_string()},
                           {"summary", (dir / "summary.csv").generic_string()}}}});
  }
  replace_file(path, j.dump(2) + "\n");
}

std::size_t RunManifest::count(RunStatus s) const {
  return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [&](const auto& e) { return e.status == s; }));
}

std::vector<RunKey> expand_runs(const ExperimentConfig& config) {
  std::vector<RunKey> out;
  for (const auto& t : config.tasks) {
    for (Algorithm a : config.algorithms) {
      for (auto b : config.budgets) {
        for (auto s : config.seeds) out.push_back({t, a, b, s});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Runs

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::string coverage_csv(const MetricRecord& rec) {
  std::string out = kCoverageHeader;
  const std::string prefix = rec.algorithm + "," + rec.task + "," + std::to_string(rec.budget) + "," +
                             std::to_string(rec.seed) + ",";
  for (std::size_t i = 0; i < rec.coverage.levels.size(); ++i) {
    out += prefix + format_number(rec.coverage.levels[i]) + "," + format_number(rec.coverage.coverage[i]) + "\n";
  }
  return out;
}

std::string summary_csv(const MetricRecord& rec) {
  return std::string(kSummaryHeader) + rec.algorithm + "," + rec.task + "," + std::to_string(rec.budget) + "," +
         std::to_string(rec.seed) + "," + format_number(rec.balancing_error) + "," +
         format_number(rec.nominal_log_posterior) + "\n";
}

void run_single(const ExperimentConfig& config, const RunKey& key, const fs::path& dir) {
  const TaskDefinition task = make_task(key.task);
  Dataset data;
  {
    std::lock_guard lock(dataset_mutex);
    data = cached_dataset(dataset_path(resolved_output(config), key), task, key.budget, key.seed, config.test_size);
  }
  TrainConfig tc = config.train;
  tc.algorithm = key.algorithm;
  const Rng root(key.seed);
  const TrainResult result = train(tc, config.model, data, task, root.split(fnv1a(algorithm_name(key.algorithm))));

  fs::create_directories(dir);
  save_checkpoint(dir / "checkpoint.bin", *result.surrogate, key.task);
  replace_file(dir / "train_log.csv", result.log.csv());

  MetricRecord rec = run_diagnostics(*result.surrogate, task, data.test, config.diagnostics, root.split(Stream::Diagnostics));
  rec.algorithm = algorithm_name(key.algorithm);
  rec.budget = key.budget;
  rec.seed = key.seed;
  replace_file(dir / "coverage.csv", coverage_csv(rec));
  replace_file(dir / "summary.csv", summary_csv(rec));
}

RunManifest run_sweep(const ExperimentConfig& config, const SweepOptions& options) {
  config.validate();
  const fs::path out = resolved_output(config);
  const fs::path manifest_path = out / "manifest.json";
  const std::vector<RunKey> keys = expand_runs(config);

  RunManifest manifest;
  if (fs::exists(manifest_path)) {
    manifest = RunManifest::load(manifest_path);
    if (manifest.config_hash != config.hash()) {
      throw std::runtime_error("manifest at '" + manifest_path.string() + "' was written for config " +
                               hex64(manifest.config_hash) + ", current config is " + hex64(config.hash()) +
                               "; use a fresh output directory");
    }
    if (manifest.runs.size() != keys.size()) throw std::runtime_error("manifest run list does not match the config");
  } else {
    if (options.resume) throw std::runtime_error("--resume given but no manifest at '" + manifest_path.string() + "'");
    manifest.config_hash = config.hash();
    for (const auto& k : keys) manifest.runs.push_back({k, RunStatus::Pending, ""});
  }
  manifest.output = out;
  fs::create_directories(out);
  replace_file(out / "config.txt", config.canonical());
  manifest.save(manifest_path);

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < manifest.runs.size(); ++i) {
    if (manifest.runs[i].status != RunStatus::Done) todo.push_back(i);
  }

  std::mutex mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t = next++; t < todo.size(); t = next++) {
      const std::size_t i = todo[t];
      const RunKey key = manifest.runs[i].key;
      RunStatus status = RunStatus::Done;
      std::string error;
      try {
        run_single(config, key, out / key.relative_dir());
      } catch (const std::exception& e) {
        status = RunStatus::Failed;
        error = e.what();
      }
      std::lock_guard lock(mutex);
      manifest.runs[i].status = status;
      manifest.runs[i].error = error;
      manifest.save(manifest_path);
      if (options.on_run) options.on_run(manifest.runs[i]);
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, todo.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  write_aggregates(out, manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// Plot data

void export_plotdata(const fs::path& manifest_path) {
  const RunManifest manifest = RunManifest::load(manifest_path);
  const fs::path out = manifest_path.parent_path();
  std::vector<std::string> missing;
  std::map<CellKey, CellData> cells;
  std::vector<CellKey> order;
  for (const auto& run : manifest.runs) {
    const fs::path dir = out / run.key.relative_dir();
    if (run.status != RunStatus::Done || !fs::exists(dir / "coverage.csv") || !fs::exists(dir / "summary.csv")) {
      missing.push_back(run.key.label());
      continue;
    }
    const CellKey ck{run.key.task, algorithm_name(run.key.algorithm), run.key.budget};
    if (!cells.count(ck)) order.push_back(ck);
    collect_run(dir, cells[ck]);
  }
  if (!missing.empty()) {
    std::string msg = "missing cells:";
    for (const auto& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }

  std::string coverage = "task,algorithm,budget,level,median,min,max\n";
  std::string balance = "task,algorithm,budget,median,min,max\n";
  std::string logpost = "task,algorithm,budget,median,min,max\n";
  for (const auto& ck : order) {
    const CellData& d = cells.at(ck);
    const std::string prefix = ck.task + "," + ck.algorithm + "," + std::to_string(ck.budget) + ",";
    for (const auto& [level, values] : d.coverage) {
      coverage += prefix + format_number(level) + "," + median_min_max(values) + "\n";
    }
    balance += prefix + median_min_max(d.balancing_error) + "\n";
    logpost += prefix + median_min_max(d.nominal_log_posterior) + "\n";
  }
  replace_file(out / "plot_coverage.csv", coverage);
  replace_file(out / "plot_balancing_error.csv", balance);
  replace_file(out / "plot_nominal_log_posterior.csv", logpost);
}

}  // namespace bsbi
