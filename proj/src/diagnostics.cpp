#include "bsbi/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bsbi/objectives.hpp"

namespace bsbi {

namespace {

constexpr std::size_t kGridChunk = 8192;
constexpr std::uint64_t kMarginalKey = 1;
constexpr std::uint64_t kRankKey = 2;

Tensor repeat_row(std::span<const double> row, std::size_t n) {
  Tensor out = Tensor::zeros(n, row.size());
  for (std::size_t i = 0; i < n; ++i) std::copy(row.begin(), row.end(), out.row(i).begin());
  return out;
}

Split head(const Split& s, std::size_t n) {
  if (n == 0 || n >= s.size()) return s;
  Split out{Tensor::zeros(n, s.theta.cols()), Tensor::zeros(n, s.x.cols())};
  std::copy_n(s.theta.data().begin(), n * s.theta.cols(), out.theta.data().begin());
  std::copy_n(s.x.data().begin(), n * s.x.cols(), out.x.data().begin());
  return out;
}

double trapezoid_weight(std::size_t i, std::size_t n) { return (i == 0 || i + 1 == n) ? 0.5 : 1.0; }

void require_2d(const Box& box) {
  if (box.dim() != 2) throw std::invalid_argument("grid diagnostics need a 2-D parameter box");
}

}  // namespace

double GridEvaluation::spacing(std::size_t axis) const {
  return (box.upper[axis] - box.lower[axis]) / static_cast<double>(resolution - 1);
}

double GridEvaluation::node(std::size_t axis, std::size_t index) const {
  if (index + 1 == resolution) return box.upper[axis];
  return box.lower[axis] + static_cast<double>(index) * spacing(axis);
}

std::vector<double> GridEvaluation::masses() const {
  std::vector<double> out(log_unnorm.size());
  const double log_area = std::log(cell_area);
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      const std::size_t idx = i * resolution + j;
      const double w = trapezoid_weight(i, resolution) * trapezoid_weight(j, resolution);
      out[idx] = w * std::exp(log_unnorm[idx] + log_area - log_z);
    }
  }
  return out;
}

GridEvaluation evaluate_grid(const SurrogateDensity& surrogate, std::span<const double> x, const Box& box,
                             std::size_t resolution) {
  require_2d(box);
  if (resolution < 2) throw std::invalid_argument("grid resolution must be at least 2");
  GridEvaluation g;
  g.box = box;
  g.resolution = resolution;
  g.cell_area = g.spacing(0) * g.spacing(1);
  const std::size_t total = resolution * resolution;
  g.log_unnorm.resize(total);
  for (std::size_t begin = 0; begin < total; begin += kGridChunk) {
    const std::size_t n = std::min(kGridChunk, total - begin);
    Tensor theta = Tensor::zeros(n, 2);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t idx = begin + r;
      theta(r, 0) = g.node(0, idx / resolution);
      theta(r, 1) = g.node(1, idx % resolution);
    }
    const std::vector<double> lu = surrogate.log_unnorm(theta, repeat_row(x, n));
    std::copy(lu.begin(), lu.end(), g.log_unnorm.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  std::vector<double> weighted(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    const double w = trapezoid_weight(idx / resolution, resolution) * trapezoid_weight(idx % resolution, resolution);
    weighted[idx] = g.log_unnorm[idx] + std::log(w);
  }
  g.log_z = logsumexp(weighted) + std::log(g.cell_area);
  if (!std::isfinite(g.log_z)) throw NumericError("grid normalizer is not finite");
  return g;
}

Tensor grid_sample(const GridEvaluation& grid, Rng& rng, std::size_t n) {
  const std::vector<double> mass = grid.masses();
  std::vector<double> cdf(mass.size());
  std::partial_sum(mass.begin(), mass.end(), cdf.begin());
  const double total = cdf.empty() ? 0.0 : cdf.back();
  if (!(total > 0.0) || !std::isfinite(total)) throw std::invalid_argument("grid_sample: grid has no mass");
  Tensor out = Tensor::zeros(n, 2);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t idx = static_cast<std::size_t>(it - cdf.begin());
    idx = std::min(idx, cdf.size() - 1);
    const std::size_t cell[2] = {idx / grid.resolution, idx % grid.resolution};
    for (std::size_t a = 0; a < 2; ++a) {
      const double c = grid.node(a, cell[a]);
      const double h = 0.5 * grid.spacing(a);
      const double lo = std::max(grid.box.lower[a], c - h);
      const double hi = std::min(grid.box.upper[a], c + h);
      out(s, a) = lo + (hi - lo) * rng.uniform();
    }
  }
  return out;
}

double hpdr_rank(double log_q_star, std::span<const double> log_q_samples, TieBreak tie, Rng* rng) {
  if (log_q_samples.empty()) throw std::invalid_argument("hpdr_rank: no posterior samples");
  std::size_t greater = 0;
  std::size_t ties = 0;
  for (double v : log_q_samples) {
    if (v > log_q_star) {
      ++greater;
    } else if (v == log_q_star) {
      ++ties;
    }
  }
  double count = static_cast<double>(greater);
  if (tie == TieBreak::Randomized && ties > 0) {
    if (!rng) throw std::invalid_argument("hpdr_rank: randomized tie-break needs a generator");
    count += rng->uniform() * static_cast<double>(ties);
  }
  return count / static_cast<double>(log_q_samples.size());
}

double hpdr_rank(const SurrogateDensity& surrogate, std::span<const double> theta_star, std::span<const double> x_star,
                 const Box& grid_box, const RankOptions& options, Rng& rng) {
  if (options.samples == 0) throw std::invalid_argument("hpdr_rank: M must be positive");
  const Tensor star = Tensor::matrix(1, theta_star.size(), {theta_star.begin(), theta_star.end()});
  const Tensor xs = Tensor::matrix(1, x_star.size(), {x_star.begin(), x_star.end()});
  const double log_q_star = surrogate.log_unnorm(star, xs)[0];
  std::vector<double> log_q;
  if (surrogate.sampleable()) {
    surrogate.sample(x_star, rng, options.samples, &log_q);
  } else {
    const GridEvaluation grid = evaluate_grid(surrogate, x_star, grid_box, options.grid_resolution);
    const Tensor samples = grid_sample(grid, rng, options.samples);
    log_q = surrogate.log_unnorm(samples, repeat_row(x_star, options.samples));
  }
  return hpdr_rank(log_q_star, log_q, options.tie, &rng);
}

std::vector<double> hpdr_ranks(const SurrogateDensity& surrogate, const Split& test, const Box& grid_box,
                               const RankOptions& options, const Rng& rng) {
  std::vector<double> ranks(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    Rng pair_rng = rng.split(i);
    ranks[i] = hpdr_rank(surrogate, test.theta.row(i), test.x.row(i), grid_box, options, pair_rng);
  }
  return ranks;
}

std::vector<double> default_levels() {
  std::vector<double> out;
  for (int i = 1; i <= 19; ++i) out.push_back(i / 20.0);
  return out;
}

CoverageCurve coverage_from_ranks(std::span<const double> ranks, const std::vector<double>& levels) {
  if (ranks.empty()) throw std::invalid_argument("expected_coverage: empty test set");
  CoverageCurve c;
  c.levels = levels;
  c.n_test = ranks.size();
  const double n = static_cast<double>(ranks.size());
  for (double level : levels) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [&](double r) { return r <= level; });
    const double p = static_cast<double>(hits) / n;
    c.coverage.push_back(p);
    c.std_error.push_back(std::sqrt(p * (1.0 - p) / n));
  }
  return c;
}

CoverageCurve expected_coverage(const SurrogateDensity& surrogate, const Split& test, const Box& grid_box,
                                const RankOptions& options, const Rng& rng, const std::vector<double>& levels) {
  if (test.size() == 0) throw std::invalid_argument("expected_coverage: empty test set");
  return coverage_from_ranks(hpdr_ranks(surrogate, test, grid_box, options, rng), levels);
}

BalanceEstimate balancing_error(const SurrogateDensity& surrogate, const Split& joint, const Split& marginal) {
  if (joint.size() == 0 || marginal.size() == 0) throw std::invalid_argument("balancing_error: empty pairs");
  const std::vector<double> pj = classifier_from_density(surrogate, joint.theta, joint.x);
  const std::vector<double> pm = classifier_from_density(surrogate, marginal.theta, marginal.x);
  auto moments = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double var = 0.0;
    for (double p : v) var += (p - m) * (p - m);
    var = v.size() > 1 ? var / (n - 1.0) : 0.0;
    return std::pair{m, var / n};
  };
  const auto [mj, vj] = moments(pj);
  const auto [mm, vm] = moments(pm);
  BalanceEstimate out;
  out.signed_value = mm + mj - 1.0;
  out.error = std::abs(out.signed_value);
  out.std_error = std::sqrt(vj + vm);
  return out;
}

double nominal_log_posterior(const SurrogateDensity& surrogate, const Split& test, const Box& grid_box,
                             std::size_t grid_resolution) {
  if (test.size() == 0) throw std::invalid_argument("nominal_log_posterior: empty test set");
  if (surrogate.normalized()) {
    const std::vector<double> lq = surrogate.log_unnorm(test.theta, test.x);
    return std::accumulate(lq.begin(), lq.end(), 0.0) / static_cast<double>(lq.size());
  }
  if (grid_resolution < kMinGridResolution) {
    throw std::invalid_argument("nominal_log_posterior: grid resolution " + std::to_string(grid_resolution) +
                                " is below " + std::to_string(kMinGridResolution));
  }
  const std::vector<double> lu = surrogate.log_unnorm(test.theta, test.x);
  double total = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    total += lu[i] - evaluate_grid(surrogate, test.x.row(i), grid_box, grid_resolution).log_z;
  }
  return total / static_cast<double>(test.size());
}

Chi2Identity chi2_identity_check(std::span<const double> probs_joint, std::span<const double> probs_marginal) {
  const double mj = std::accumulate(probs_joint.begin(), probs_joint.end(), 0.0) / probs_joint.size();
  const double mm = std::accumulate(probs_marginal.begin(), probs_marginal.end(), 0.0) / probs_marginal.size();
  // Marginal classifier over pairs drawn from either class with probability 1/2.
  const double w1 = 0.5 * (mj + mm);
  const double w[2] = {1.0 - w1, w1};
  const double uniform[2] = {0.5, 0.5};
  return {chi2_divergence(w, uniform), balance_binary(probs_joint, probs_marginal)};
}

namespace {

void check_pair(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw std::invalid_argument("divergence: distributions differ in size");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0 && !(q[i] > 0.0)) {
      throw std::invalid_argument("divergence: q vanishes where p has mass (index " + std::to_string(i) + ")");
    }
  }
}

}  // namespace

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  check_pair(p, q);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

double chi2_divergence(std::span<const double> p, std::span<const double> q) {
  check_pair(p, q);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (q[i] > 0.0) s += (p[i] - q[i]) * (p[i] - q[i]) / q[i];
  }
  return s;
}

bool kl_chi2_inequality_check(std::span<const double> p, std::span<const double> q) {
  return kl_divergence(p, q) <= chi2_divergence(p, q);
}

MetricRecord run_diagnostics(const SurrogateDensity& surrogate, const TaskDefinition& task, const Split& test,
                             const DiagnosticsOptions& options, const Rng& rng) {
  MetricRecord rec;
  rec.task = task.name;
  const Split coverage_set = head(test, options.coverage_pairs);
  rec.coverage = expected_coverage(surrogate, coverage_set, task.grid_bounds, options.rank, rng.split(kRankKey));

  Rng marginal_rng = rng.split(kMarginalKey);
  const Split marginal{shuffle_rows(test.theta, marginal_rng), test.x};
  rec.balancing_error = balancing_error(surrogate, test, marginal).error;

  rec.nominal_log_posterior =
      nominal_log_posterior(surrogate, head(test, options.log_posterior_pairs), task.grid_bounds,
                            options.grid_resolution);
  return rec;
}

}  // namespace bsbi
