#include "bsbi/simulators.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "bsbi/binary_io.hpp"

namespace bsbi {

namespace {

void require_support(const PriorSpec& prior, std::span<const double> theta, const char* who) {
  if (theta.size() != prior.dim()) {
    throw DomainError(std::string(who) + ": expected " + std::to_string(prior.dim()) + " parameters, got " +
                      std::to_string(theta.size()));
  }
  if (!prior.in_support(theta)) throw DomainError(std::string(who) + ": parameter outside prior support");
}

const PriorSpec& two_moons_prior() {
  static const PriorSpec p = PriorSpec::box_uniform({-1.0, -1.0}, {1.0, 1.0});
  return p;
}

const PriorSpec& slcp_full_prior() {
  static const PriorSpec p = PriorSpec::box_uniform(std::vector<double>(5, -3.0), std::vector<double>(5, 3.0));
  return p;
}

constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace

// ---------------------------------------------------------------------------
// Priors

bool Box::contains(std::span<const double> p) const {
  if (p.size() != lower.size()) return false;
  for (std::size_t d = 0; d < p.size(); ++d) {
    if (!(p[d] >= lower[d] && p[d] <= upper[d])) return false;
  }
  return true;
}

double Box::log_volume() const {
  double v = 0.0;
  for (std::size_t d = 0; d < lower.size(); ++d) v += std::log(upper[d] - lower[d]);
  return v;
}

PriorSpec PriorSpec::box_uniform(std::vector<double> lower, std::vector<double> upper) {
  if (lower.size() != upper.size() || lower.empty()) {
    throw DomainError("box prior needs matching, non-empty bound vectors");
  }
  for (std::size_t d = 0; d < lower.size(); ++d) {
    if (!(lower[d] < upper[d])) throw DomainError("box prior needs lower < upper in every dimension");
  }
  PriorSpec p;
  p.kind_ = Kind::BoxUniform;
  p.dim_ = lower.size();
  p.box_ = Box{std::move(lower), std::move(upper)};
  return p;
}

PriorSpec PriorSpec::standard_normal(std::size_t dim) {
  if (dim == 0) throw DomainError("normal prior needs dim >= 1");
  PriorSpec p;
  p.kind_ = Kind::StandardNormal;
  p.dim_ = dim;
  return p;
}

bool PriorSpec::in_support(std::span<const double> theta) const {
  if (theta.size() != dim_) return false;
  if (kind_ == Kind::BoxUniform) return box_.contains(theta);
  return std::all_of(theta.begin(), theta.end(), [](double v) { return std::isfinite(v); });
}

double PriorSpec::log_density(std::span<const double> theta) const {
  if (!in_support(theta)) return -std::numeric_limits<double>::infinity();
  if (kind_ == Kind::BoxUniform) return -box_.log_volume();
  double s = 0.0;
  for (double v : theta) s += v * v;
  return -0.5 * s - 0.5 * static_cast<double>(dim_) * kLog2Pi;
}

ParamVector PriorSpec::sample(Rng& rng) const {
  ParamVector out(dim_);
  for (std::size_t d = 0; d < dim_; ++d) {
    out[d] = kind_ == Kind::BoxUniform ? rng.uniform(box_.lower[d], box_.upper[d]) : rng.normal();
  }
  return out;
}

double GaussianPosterior::log_density(std::span<const double> theta) const {
  double s = 0.0;
  for (std::size_t d = 0; d < mean.size(); ++d) s += (theta[d] - mean[d]) * (theta[d] - mean[d]);
  const double dim = static_cast<double>(mean.size());
  return -0.5 * s / variance - 0.5 * dim * (kLog2Pi + std::log(variance));
}

ParamVector GaussianPosterior::sample(Rng& rng) const {
  ParamVector out(mean.size());
  const double sd = std::sqrt(variance);
  for (std::size_t d = 0; d < mean.size(); ++d) out[d] = mean[d] + sd * rng.normal();
  return out;
}

SimPair TaskDefinition::sample_joint(Rng& rng) const {
  SimPair p;
  p.theta = prior.sample(rng);
  p.x = simulate(p.theta, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Simulators

Observation two_moons_simulate(std::span<const double> theta, Rng& rng) {
  require_support(two_moons_prior(), theta, "two_moons_simulate");
  const double a = rng.uniform(-std::numbers::pi / 2.0, std::numbers::pi / 2.0);
  const double r = rng.normal(0.1, 0.01);
  const double px = r * std::cos(a) + 0.25;
  const double py = r * std::sin(a);
  return {px - std::abs(theta[0] + theta[1]) / std::numbers::sqrt2,
          py + (-theta[0] + theta[1]) / std::numbers::sqrt2};
}

Observation slcp_simulate(std::span<const double> theta, Rng& rng) {
  require_support(slcp_full_prior(), theta, "slcp_simulate");
  const double s1 = std::max(theta[2] * theta[2], 1e-8);
  const double s2 = std::max(theta[3] * theta[3], 1e-8);
  const double rho = std::tanh(theta[4]);
  // Cholesky factor of [[s1^2, rho s1 s2], [rho s1 s2, s2^2]].
  const double l11 = s1;
  const double l21 = rho * s2;
  const double l22 = s2 * std::sqrt(1.0 - rho * rho);
  if (!(l22 >= 0.0) || !std::isfinite(l22)) throw DomainError("slcp_simulate: covariance not positive semi-definite");
  Observation x(8);
  for (int k = 0; k < 4; ++k) {
    const double z1 = rng.normal();
    const double z2 = rng.normal();
    x[2 * k] = theta[0] + l11 * z1;
    x[2 * k + 1] = theta[1] + l21 * z1 + l22 * z2;
  }
  return x;
}

Observation gaussian_linear_simulate(std::span<const double> theta, Rng& rng) {
  if (theta.size() != 2) throw DomainError("gaussian_linear_simulate: expected 2 parameters");
  return {theta[0] + kGaussianLinearNoiseSd * rng.normal(), theta[1] + kGaussianLinearNoiseSd * rng.normal()};
}

GaussianPosterior gaussian_linear_posterior(std::span<const double> x) {
  if (x.size() != 2) throw DomainError("gaussian_linear_posterior: expected a 2-D observation");
  constexpr double noise_var = kGaussianLinearNoiseSd * kGaussianLinearNoiseSd;
  GaussianPosterior post;
  post.mean = {x[0] / (1.0 + noise_var), x[1] / (1.0 + noise_var)};
  post.variance = noise_var / (1.0 + noise_var);
  return post;
}

TaskDefinition two_moons_task() {
  TaskDefinition t;
  t.name = "two_moons";
  t.prior = two_moons_prior();
  t.theta_dim = 2;
  t.x_dim = 2;
  t.simulate = [](std::span<const double> theta, Rng& rng) { return two_moons_simulate(theta, rng); };
  t.grid_bounds = t.prior.box();
  return t;
}

TaskDefinition slcp_task() {
  TaskDefinition t;
  t.name = "slcp";
  t.prior = PriorSpec::box_uniform({-3.0, -3.0}, {3.0, 3.0});
  t.theta_dim = 2;
  t.x_dim = 8;
  t.simulate = [](std::span<const double> target, Rng& rng) {
    if (target.size() != 2) throw DomainError("slcp: inference target is (theta_1, theta_2)");
    ParamVector full = slcp_full_prior().sample(rng);
    full[0] = target[0];
    full[1] = target[1];
    return slcp_simulate(full, rng);
  };
  t.grid_bounds = t.prior.box();
  return t;
}

TaskDefinition gaussian_linear_task() {
  TaskDefinition t;
  t.name = "gaussian_linear";
  t.prior = PriorSpec::standard_normal(2);
  t.theta_dim = 2;
  t.x_dim = 2;
  t.simulate = [](std::span<const double> theta, Rng& rng) { return gaussian_linear_simulate(theta, rng); };
  t.grid_bounds = Box{{-6.0, -6.0}, {6.0, 6.0}};
  t.analytic_posterior = [](std::span<const double> x) { return gaussian_linear_posterior(x); };
  return t;
}

TaskDefinition make_task(const std::string& name) {
  if (name == "two_moons") return two_moons_task();
  if (name == "slcp") return slcp_task();
  if (name == "gaussian_linear") return gaussian_linear_task();
  throw std::invalid_argument("unknown task '" + name + "' (expected two_moons, slcp or gaussian_linear)");
}

std::vector<std::string> task_names() { return {"two_moons", "slcp", "gaussian_linear"}; }

// ---------------------------------------------------------------------------
// Datasets

SimPair Split::pair(std::size_t i) const {
  const auto t = theta.row(i);
  const auto o = x.row(i);
  return {ParamVector(t.begin(), t.end()), Observation(o.begin(), o.end())};
}

Split sample_joint_split(const TaskDefinition& task, std::size_t n, Rng& rng) {
  Split s{Tensor::zeros(n, task.theta_dim), Tensor::zeros(n, task.x_dim)};
  for (std::size_t i = 0; i < n; ++i) {
    const SimPair p = task.sample_joint(rng);
    std::copy(p.theta.begin(), p.theta.end(), s.theta.row(i).begin());
    std::copy(p.x.begin(), p.x.end(), s.x.row(i).begin());
  }
  return s;
}

namespace {

Split slice_rows(const Split& s, std::size_t begin, std::size_t end) {
  Split out{Tensor::zeros(end - begin, s.theta.cols()), Tensor::zeros(end - begin, s.x.cols())};
  for (std::size_t i = begin; i < end; ++i) {
    std::copy(s.theta.row(i).begin(), s.theta.row(i).end(), out.theta.row(i - begin).begin());
    std::copy(s.x.row(i).begin(), s.x.row(i).end(), out.x.row(i - begin).begin());
  }
  return out;
}

void validate_budget(std::uint64_t budget) {
  if (budget < kMinBudget) {
    throw std::invalid_argument("simulation budget " + std::to_string(budget) + " is below the minimum of " +
                                std::to_string(kMinBudget));
  }
}

}  // namespace

Dataset generate_dataset(const TaskDefinition& task, std::uint64_t budget, std::uint64_t seed,
                         std::size_t test_size) {
  validate_budget(budget);
  const Rng root(seed);
  Rng data_rng = root.split(Stream::Dataset);
  Rng test_rng = root.split(Stream::TestSet);

  Dataset ds;
  ds.task = task.name;
  ds.budget = budget;
  ds.seed = seed;
  ds.theta_dim = task.theta_dim;
  ds.x_dim = task.x_dim;

  const std::size_t n = static_cast<std::size_t>(budget);
  const std::size_t n_val = n / 10;
  const Split all = sample_joint_split(task, n, data_rng);
  ds.train = slice_rows(all, 0, n - n_val);
  ds.val = slice_rows(all, n - n_val, n);
  ds.test = sample_joint_split(task, test_size, test_rng);
  return ds;
}

std::vector<SimPair> shuffle_marginal_batch(const std::vector<SimPair>& batch, Rng& rng) {
  if (batch.size() < 2) throw std::invalid_argument("shuffle_marginal_batch needs at least 2 pairs");
  std::vector<std::size_t> perm(batch.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<SimPair> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out.push_back({batch[perm[i]].theta, batch[i].x});
  return out;
}

Tensor shuffle_rows(const Tensor& theta, Rng& rng) {
  if (theta.rows() < 2) throw std::invalid_argument("shuffle_rows needs at least 2 rows");
  std::vector<std::size_t> perm(theta.rows());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor out = Tensor::zeros(theta.rows(), theta.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy(theta.row(perm[i]).begin(), theta.row(perm[i]).end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cache

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    BinaryWriter w(tmp);
    w.envelope();
    w.string(ds.task);
    w.u64(ds.budget);
    w.u64(ds.seed);
    w.u32(static_cast<std::uint32_t>(ds.theta_dim));
    w.u32(static_cast<std::uint32_t>(ds.x_dim));
    w.u64(ds.train.size() + ds.val.size() + ds.test.size());
    for (const Split* s : {&ds.train, &ds.val, &ds.test}) {
      for (std::size_t i = 0; i < s->size(); ++i) {
        for (double v : s->theta.row(i)) w.f64(v);
        for (double v : s->x.row(i)) w.f64(v);
      }
    }
    w.close();
  }
  std::filesystem::rename(tmp, path);
}

std::optional<Dataset> load_dataset(const std::filesystem::path& path, const TaskDefinition& task,
                                    std::uint64_t budget, std::uint64_t seed, std::size_t test_size) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  BinaryReader r(path);
  r.envelope();
  Dataset ds;
  ds.task = r.string();
  ds.budget = r.u64();
  ds.seed = r.u64();
  ds.theta_dim = r.u32();
  ds.x_dim = r.u32();
  const std::uint64_t count = r.u64();
  if (ds.task != task.name || ds.budget != budget || ds.seed != seed || ds.theta_dim != task.theta_dim ||
      ds.x_dim != task.x_dim || count != budget + test_size) {
    return std::nullopt;
  }
  const std::size_t n = static_cast<std::size_t>(budget);
  const std::size_t n_val = n / 10;
  auto read_split = [&](std::size_t rows) {
    Split s{Tensor::zeros(rows, ds.theta_dim), Tensor::zeros(rows, ds.x_dim)};
    for (std::size_t i = 0; i < rows; ++i) {
      for (double& v : s.theta.row(i)) v = r.f64();
      for (double& v : s.x.row(i)) v = r.f64();
    }
    return s;
  };
  ds.train = read_split(n - n_val);
  ds.val = read_split(n_val);
  ds.test = read_split(test_size);
  return ds;
}

Dataset cached_dataset(const std::filesystem::path& path, const TaskDefinition& task, std::uint64_t budget,
                       std::uint64_t seed, std::size_t test_size) {
  if (auto hit = load_dataset(path, task, budget, seed, test_size)) return *std::move(hit);
  Dataset ds = generate_dataset(task, budget, seed, test_size);
  save_dataset(path, ds);
  return ds;
}

}  // namespace bsbi
