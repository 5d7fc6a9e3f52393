#pragma once

// Conditional neural spline flow q(theta | x).
//
// Generative direction: z ~ N(0, I) -> coupling transforms -> optional
// prior map onto the prior box -> theta. Densities are evaluated through the
// inverse direction, which is also the direction recorded on the tape during
// training.

#include <optional>
#include <vector>

#include "bsbi/nn.hpp"
#include "bsbi/rng.hpp"
#include "bsbi/simulators.hpp"
#include "bsbi/spline.hpp"
#include "bsbi/tensor.hpp"

namespace bsbi {

/// Log density reported for theta outside the prior box.
inline constexpr double kOutsideSupportLogProb = -1e10;

/// Bijection R^D -> box: n -> Phi(n) -> a + (b - a) Phi(n).
class PriorMapTransform {
 public:
  PriorMapTransform() = default;
  explicit PriorMapTransform(Box box) : box_(std::move(box)) {}

  const Box& box() const { return box_; }

  /// Base-normal coordinate to the box. Returns log|d theta / d n|.
  double forward(std::span<const double> n, std::span<double> theta) const;
  /// Box to base-normal coordinate. Returns log|d n / d theta|.
  double inverse(std::span<const double> theta, std::span<double> n) const;

 private:
  Box box_;
};

/// Standard normal CDF with |n| clamped to 8, and its inverse.
double normal_cdf(double n);
double normal_quantile(double p);
double normal_log_pdf(double n);

enum class FlowInit { Standard, ExactZero, ScaledBy5 };

struct FlowConfig {
  std::size_t theta_dim = 2;
  std::size_t x_dim = 2;
  std::size_t transforms = 3;
  std::size_t hidden = 256;
  /// Linear maps per conditioner MLP.
  std::size_t conditioner_layers = 3;
  SplineConfig spline;
};

class CouplingLayer {
 public:
  CouplingLayer() = default;
  CouplingLayer(std::size_t index, const FlowConfig& cfg);

  const std::vector<std::size_t>& transformed() const { return transformed_; }
  const std::vector<std::size_t>& passthrough() const { return passthrough_; }
  Mlp& conditioner() { return conditioner_; }
  const Mlp& conditioner() const { return conditioner_; }

 private:
  std::vector<std::size_t> transformed_;
  std::vector<std::size_t> passthrough_;
  Mlp conditioner_;
};

class ConditionalFlow {
 public:
  ConditionalFlow() = default;
  /// `prior_box` attaches a terminal PriorMapTransform.
  ConditionalFlow(FlowConfig cfg, std::optional<Box> prior_box);

  void init(FlowInit scheme, Rng& rng);

  const FlowConfig& config() const { return cfg_; }
  bool has_prior_map() const { return prior_map_.has_value(); }
  const std::optional<PriorMapTransform>& prior_map() const { return prior_map_; }
  const std::vector<CouplingLayer>& layers() const { return layers_; }
  Standardizer& context_normalizer() { return context_; }
  const Standardizer& context_normalizer() const { return context_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  /// Normalized log q(theta | x) per row, recorded on `bound`'s tape.
  /// Throws DomainError if a theta lies outside the prior box.
  Var log_prob(Tape& tape, const Tensor& theta, const Tensor& x, const std::vector<Var>& bound) const;

  /// Tape-free log q(theta | x); rows outside the prior box get
  /// kOutsideSupportLogProb.
  std::vector<double> log_prob(const Tensor& theta, const Tensor& x) const;

  /// n draws from q(. | x) and, optionally, their log densities.
  Tensor sample(std::span<const double> x, Rng& rng, std::size_t n, std::vector<double>* log_probs = nullptr) const;

  /// Coupling stack only (no prior map), generative direction. `log_dets`
  /// receives the per-row forward log|det|.
  Tensor forward_transforms(const Tensor& z, const Tensor& x, std::vector<double>* log_dets = nullptr) const;
  /// Inverse of forward_transforms, with the inverse-direction log|det|.
  Tensor inverse_transforms(const Tensor& y, const Tensor& x, std::vector<double>* log_dets = nullptr) const;

 private:
  Tensor context(const Tensor& x) const;

  FlowConfig cfg_;
  std::vector<CouplingLayer> layers_;
  std::optional<PriorMapTransform> prior_map_;
  Standardizer context_;
};

/// Tape op: applies the spline inverse to each row of `values` (n x 1) with
/// per-row raw parameters `params` (n x P). Output is n x 2 holding
/// (inverse value, inverse log|det|).
Var spline_inverse_op(Var values, Var params, const SplineConfig& cfg);
/// Same for the forward direction.
Var spline_forward_op(Var values, Var params, const SplineConfig& cfg);

}  // namespace bsbi
