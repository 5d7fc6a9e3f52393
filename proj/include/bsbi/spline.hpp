#pragma once

// Monotone rational-quadratic spline on [-B, B] with identity tails.
//
// Raw parameters are packed per transformed value as
//   [widths (K) | heights (K) | log-derivatives (K-1)],
// widths/heights pass through a softmax and are scaled to 2B, internal knot
// derivatives are exp(raw); boundary derivatives are fixed to 1 so the spline
// joins the identity tails with a continuous slope.

#include <cstddef>
#include <span>
#include <vector>

namespace bsbi {

struct SplineConfig {
  std::size_t bins = 8;
  double bound = 5.0;
  /// Lower bound on each bin's share of 2B (widths and heights).
  double min_bin_fraction = 1e-3;

  std::size_t param_count() const { return 3 * bins - 1; }
};

inline constexpr std::size_t kMaxSplineBins = 16;

struct RQSplineParams {
  std::vector<double> widths;      // raw, length K
  std::vector<double> heights;     // raw, length K
  std::vector<double> log_derivs;  // raw, length K - 1
  double bound = 5.0;

  static RQSplineParams identity(std::size_t bins, double bound);
  std::vector<double> packed() const;
  SplineConfig config() const;
};

struct SplineValue {
  double value = 0.0;
  double log_abs_det = 0.0;
};

/// Value together with partial derivatives of value and log|det| with
/// respect to the input and each packed raw parameter.
struct SplineJacobian {
  SplineValue out;
  double dvalue_dinput = 0.0;
  double dlogdet_dinput = 0.0;
  std::vector<double> dvalue_dparams;
  std::vector<double> dlogdet_dparams;
};

SplineValue spline_forward(double u, std::span<const double> packed, const SplineConfig& cfg);
SplineValue spline_inverse(double v, std::span<const double> packed, const SplineConfig& cfg);
SplineJacobian spline_forward_jacobian(double u, std::span<const double> packed, const SplineConfig& cfg);
SplineJacobian spline_inverse_jacobian(double v, std::span<const double> packed, const SplineConfig& cfg);

inline SplineValue spline_forward(double u, const RQSplineParams& p) {
  return spline_forward(u, p.packed(), p.config());
}
inline SplineValue spline_inverse(double v, const RQSplineParams& p) {
  return spline_inverse(v, p.packed(), p.config());
}

/// Bin widths implied by raw width parameters (they sum to 2B).
std::vector<double> spline_bin_widths(std::span<const double> raw, const SplineConfig& cfg);

}  // namespace bsbi
