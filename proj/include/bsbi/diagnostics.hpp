#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bsbi/rng.hpp"
#include "bsbi/simulators.hpp"
#include "bsbi/surrogate.hpp"

namespace bsbi {

inline constexpr std::size_t kDefaultGridResolution = 256;
inline constexpr std::size_t kMinGridResolution = 64;
inline constexpr std::size_t kDefaultPosteriorSamples = 1024;

/// Surrogate density on a lattice of resolution^2 nodes spanning a 2-D box
/// (edges included), normalized by trapezoidal quadrature.
struct GridEvaluation {
  Box box;
  std::size_t resolution = 0;
  /// log_unnorm at node (i, j), stored at i * resolution + j; i indexes the
  /// first parameter.
  std::vector<double> log_unnorm;
  double log_z = 0.0;
  /// Area of one lattice cell.
  double cell_area = 0.0;

  double node(std::size_t axis, std::size_t index) const;
  double spacing(std::size_t axis) const;
  /// Quadrature mass of every node; sums to one.
  std::vector<double> masses() const;
};

GridEvaluation evaluate_grid(const SurrogateDensity& surrogate, std::span<const double> x, const Box& box,
                             std::size_t resolution = kDefaultGridResolution);

/// n draws: a node picked with probability equal to its mass, then a uniform
/// jitter within the node's cell (half cells on the box edges).
Tensor grid_sample(const GridEvaluation& grid, Rng& rng, std::size_t n);

enum class TieBreak { Strict, Randomized };

/// Fraction of posterior samples whose density exceeds the density at
/// theta_star. Randomized mode adds U * (#ties) with one U ~ U(0,1).
double hpdr_rank(double log_q_star, std::span<const double> log_q_samples, TieBreak tie, Rng* rng = nullptr);

/// Draws posterior samples for `x` and returns the rank of `theta_star`.
/// Flow and reference surrogates sample directly, ratio surrogates through a
/// grid over `grid_box`.
struct RankOptions {
  std::size_t samples = kDefaultPosteriorSamples;
  TieBreak tie = TieBreak::Strict;
  std::size_t grid_resolution = kDefaultGridResolution;
};
double hpdr_rank(const SurrogateDensity& surrogate, std::span<const double> theta_star, std::span<const double> x_star,
                 const Box& grid_box, const RankOptions& options, Rng& rng);

/// Ranks of every test pair; pair i draws from rng.split(i).
std::vector<double> hpdr_ranks(const SurrogateDensity& surrogate, const Split& test, const Box& grid_box,
                               const RankOptions& options, const Rng& rng);

std::vector<double> default_levels();

struct CoverageCurve {
  std::vector<double> levels;
  std::vector<double> coverage;
  std::size_t n_test = 0;
  /// Binomial standard error per level.
  std::vector<double> std_error;
};

/// Coverage at level 1 - alpha is the fraction of ranks <= 1 - alpha.
CoverageCurve coverage_from_ranks(std::span<const double> ranks, const std::vector<double>& levels);
CoverageCurve expected_coverage(const SurrogateDensity& surrogate, const Split& test, const Box& grid_box,
                                const RankOptions& options, const Rng& rng,
                                const std::vector<double>& levels = default_levels());

struct BalanceEstimate {
  /// |mean_marginal w + mean_joint w - 1|.
  double error = 0.0;
  /// Monte-Carlo standard error of the signed sum.
  double std_error = 0.0;
  double signed_value = 0.0;
};

BalanceEstimate balancing_error(const SurrogateDensity& surrogate, const Split& joint, const Split& marginal);

/// Mean normalized log density at the test pairs. Surrogates that are not
/// normalized are normalized per x on a grid over `grid_box`; resolutions
/// below kMinGridResolution are rejected.
double nominal_log_posterior(const SurrogateDensity& surrogate, const Split& test, const Box& grid_box,
                             std::size_t grid_resolution = kDefaultGridResolution);

struct Chi2Identity {
  /// Chi-squared divergence between the marginal classifier and the uniform
  /// class prior.
  double lhs = 0.0;
  /// Binary balance criterion on the same pairs.
  double rhs = 0.0;
};
Chi2Identity chi2_identity_check(std::span<const double> probs_joint, std::span<const double> probs_marginal);

/// Discrete divergences; throw std::invalid_argument when q = 0 where p > 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);
double chi2_divergence(std::span<const double> p, std::span<const double> q);
bool kl_chi2_inequality_check(std::span<const double> p, std::span<const double> q);

struct MetricRecord {
  std::string algorithm;
  std::string task;
  std::uint64_t budget = 0;
  std::uint64_t seed = 0;
  CoverageCurve coverage;
  double balancing_error = 0.0;
  double nominal_log_posterior = 0.0;
};

struct DiagnosticsOptions {
  RankOptions rank;
  /// Test pairs used for coverage and for the nominal log posterior; 0 uses
  /// the whole test split.
  std::size_t coverage_pairs = 0;
  std::size_t log_posterior_pairs = 0;
  std::size_t grid_resolution = kDefaultGridResolution;
};

/// Coverage, balancing error (marginal pairs: shuffled test split) and
/// nominal log posterior of `surrogate` on `test`.
MetricRecord run_diagnostics(const SurrogateDensity& surrogate, const TaskDefinition& task, const Split& test,
                             const DiagnosticsOptions& options, const Rng& rng);

}  // namespace bsbi
