#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bsbi/rng.hpp"
#include "bsbi/tensor.hpp"

namespace bsbi {

class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using ParamVector = std::vector<double>;
using Observation = std::vector<double>;

struct Box {
  std::vector<double> lower;
  std::vector<double> upper;

  std::size_t dim() const { return lower.size(); }
  bool contains(std::span<const double> p) const;
  double log_volume() const;
};

class PriorSpec {
 public:
  enum class Kind { BoxUniform, StandardNormal };

  static PriorSpec box_uniform(std::vector<double> lower, std::vector<double> upper);
  static PriorSpec standard_normal(std::size_t dim);

  Kind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  /// Support bounds; only meaningful for box-uniform priors.
  const Box& box() const { return box_; }
  bool is_box() const { return kind_ == Kind::BoxUniform; }

  bool in_support(std::span<const double> theta) const;
  /// -infinity outside the support.
  double log_density(std::span<const double> theta) const;
  ParamVector sample(Rng& rng) const;

 private:
  Kind kind_ = Kind::StandardNormal;
  std::size_t dim_ = 0;
  Box box_;
};

struct SimPair {
  ParamVector theta;
  Observation x;
};

/// Analytic posterior of the Gaussian-linear task: N(mean, var * I).
struct GaussianPosterior {
  std::vector<double> mean;
  double variance = 0.0;

  double log_density(std::span<const double> theta) const;
  ParamVector sample(Rng& rng) const;
};

struct TaskDefinition {
  std::string name;
  /// Prior over the inference target.
  PriorSpec prior;
  std::size_t theta_dim = 0;
  std::size_t x_dim = 0;
  /// Draws x ~ p(x | theta) for an in-support inference target theta.
  std::function<Observation(std::span<const double>, Rng&)> simulate;
  /// Box used for 2-D grid diagnostics (the prior box for uniform priors).
  Box grid_bounds;
  std::function<GaussianPosterior(std::span<const double>)> analytic_posterior;

  SimPair sample_joint(Rng& rng) const;
};

Observation two_moons_simulate(std::span<const double> theta, Rng& rng);
/// Full 5-parameter SLCP simulator: 4 iid 2-D points -> 8 values.
Observation slcp_simulate(std::span<const double> theta, Rng& rng);
Observation gaussian_linear_simulate(std::span<const double> theta, Rng& rng);
GaussianPosterior gaussian_linear_posterior(std::span<const double> x);

inline constexpr double kGaussianLinearNoiseSd = 0.5;

TaskDefinition two_moons_task();
/// Inference target is (theta_1, theta_2); theta_3..5 are nuisance parameters
/// drawn from the prior inside every simulation.
TaskDefinition slcp_task();
TaskDefinition gaussian_linear_task();
/// "two_moons", "slcp" or "gaussian_linear".
TaskDefinition make_task(const std::string& name);
std::vector<std::string> task_names();

/// Parameters stacked as rows.
struct Split {
  Tensor theta;
  Tensor x;

  std::size_t size() const { return theta.rows(); }
  SimPair pair(std::size_t i) const;
};

struct Dataset {
  std::string task;
  std::uint64_t budget = 0;
  std::uint64_t seed = 0;
  std::size_t theta_dim = 0;
  std::size_t x_dim = 0;
  Split train;
  Split val;
  Split test;
};

inline constexpr std::size_t kDefaultTestSize = 1000;
inline constexpr std::uint64_t kMinBudget = 64;

/// `budget` joint draws split 90/10 into train/val (val = budget / 10, the
/// rest is train), plus `test_size` held-out pairs from a separate stream that
/// depends only on the seed.
Dataset generate_dataset(const TaskDefinition& task, std::uint64_t budget, std::uint64_t seed,
                         std::size_t test_size = kDefaultTestSize);

/// Draws `n` joint pairs from the stream `rng`.
Split sample_joint_split(const TaskDefinition& task, std::size_t n, Rng& rng);

/// Pairs (theta_perm(i), x_i) for a uniformly random permutation of the batch.
std::vector<SimPair> shuffle_marginal_batch(const std::vector<SimPair>& batch, Rng& rng);
/// Tensor form: returns a row-permuted copy of `theta`.
Tensor shuffle_rows(const Tensor& theta, Rng& rng);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
/// Returns the cached dataset iff the header matches (task, budget, seed,
/// dimensions and record count) exactly.
std::optional<Dataset> load_dataset(const std::filesystem::path& path, const TaskDefinition& task,
                                    std::uint64_t budget, std::uint64_t seed,
                                    std::size_t test_size = kDefaultTestSize);
/// Loads from `path` on a cache hit, else generates and writes the cache.
Dataset cached_dataset(const std::filesystem::path& path, const TaskDefinition& task, std::uint64_t budget,
                       std::uint64_t seed, std::size_t test_size = kDefaultTestSize);

}  // namespace bsbi
