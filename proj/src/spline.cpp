#include "bsbi/spline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "bsbi/tensor.hpp"

namespace bsbi {

namespace {

constexpr std::size_t kMaxTangents = 3 * kMaxSplineBins;

// Forward-mode dual number with a runtime number of tangent directions.
struct Dual {
  double v = 0.0;
  std::size_t n = 0;
  std::array<double, kMaxTangents> d{};

  Dual() = default;
  Dual(double value, std::size_t dims) : v(value), n(dims) {}
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v, a.n);
  for (std::size_t i = 0; i < a.n; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v, a.n);
  for (std::size_t i = 0; i < a.n; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v, a.n);
  for (std::size_t i = 0; i < a.n; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v, a.n);
  const double inv = 1.0 / b.v;
  for (std::size_t i = 0; i < a.n; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) * inv;
  return r;
}
Dual operator*(double s, const Dual& a) {
  Dual r(s * a.v, a.n);
  for (std::size_t i = 0; i < a.n; ++i) r.d[i] = s * a.d[i];
  return r;
}
Dual operator+(const Dual& a, double s) {
  Dual r = a;
  r.v += s;
  return r;
}
Dual operator-(double s, const Dual& a) { return (-1.0 * a) + s; }
Dual exp(const Dual& a) {
  Dual r(std::exp(a.v), a.n);
  for (std::size_t i = 0; i < a.n; ++i) r.d[i] = r.v * a.d[i];
  return r;
}
Dual log(const Dual& a) {
  Dual r(std::log(a.v), a.n);
  for (std::size_t i = 0; i < a.n; ++i) r.d[i] = a.d[i] / a.v;
  return r;
}

double value_of(double x) { return x; }
double value_of(const Dual& x) { return x.v; }

template <typename S>
S constant_like(double c, const S& like) {
  if constexpr (std::is_same_v<S, Dual>) {
    return Dual(c, like.n);
  } else {
    (void)like;
    return c;
  }
}

using std::exp;
using std::log;

// Softmax scaled to 2B with a floor on each share.
template <typename S>
void bin_sizes(const S* raw, std::size_t k, const SplineConfig& cfg, std::array<S, kMaxSplineBins>& out) {
  double m = value_of(raw[0]);
  for (std::size_t i = 1; i < k; ++i) m = std::max(m, value_of(raw[i]));
  S total = constant_like(0.0, raw[0]);
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = exp(raw[i] + (-m));
    total = total + out[i];
  }
  const double span = 2.0 * cfg.bound;
  const double free_share = 1.0 - static_cast<double>(k) * cfg.min_bin_fraction;
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = (span * free_share) * (out[i] / total) + span * cfg.min_bin_fraction;
  }
}

template <typename S>
struct Knots {
  std::array<S, kMaxSplineBins + 1> x;
  std::array<S, kMaxSplineBins + 1> y;
  std::array<S, kMaxSplineBins + 1> delta;
};

template <typename S>
Knots<S> make_knots(const S* packed, const SplineConfig& cfg) {
  const std::size_t k = cfg.bins;
  std::array<S, kMaxSplineBins> w, h;
  bin_sizes(packed, k, cfg, w);
  bin_sizes(packed + k, k, cfg, h);
  Knots<S> kn;
  const S lo = constant_like(-cfg.bound, packed[0]);
  kn.x[0] = lo;
  kn.y[0] = lo;
  for (std::size_t i = 1; i < k; ++i) {
    kn.x[i] = kn.x[i - 1] + w[i - 1];
    kn.y[i] = kn.y[i - 1] + h[i - 1];
  }
  kn.x[k] = constant_like(cfg.bound, packed[0]);
  kn.y[k] = constant_like(cfg.bound, packed[0]);
  kn.delta[0] = constant_like(1.0, packed[0]);
  kn.delta[k] = constant_like(1.0, packed[0]);
  for (std::size_t i = 1; i < k; ++i) kn.delta[i] = exp(packed[2 * k + i - 1]);
  return kn;
}

template <typename S>
std::size_t find_bin(const std::array<S, kMaxSplineBins + 1>& knots, std::size_t k, double at) {
  std::size_t b = 0;
  while (b + 1 < k && at >= value_of(knots[b + 1])) ++b;
  return b;
}

// Value and log-derivative inside bin `b` at fractional position xi.
template <typename S>
std::pair<S, S> rq_bin(const Knots<S>& kn, std::size_t b, const S& xi) {
  const S width = kn.x[b + 1] - kn.x[b];
  const S height = kn.y[b + 1] - kn.y[b];
  const S s = height / width;
  const S d0 = kn.delta[b];
  const S d1 = kn.delta[b + 1];
  const S one_minus = 1.0 - xi;
  const S xi_1m = xi * one_minus;
  const S num = height * (s * xi * xi + d0 * xi_1m);
  const S den = s + (d1 + d0 - 2.0 * s) * xi_1m;
  const S value = kn.y[b] + num / den;
  const S dnum = s * s * (d1 * xi * xi + 2.0 * s * xi_1m + d0 * one_minus * one_minus);
  const S logdet = log(dnum) - 2.0 * log(den);
  return {value, logdet};
}

template <typename S>
std::pair<S, S> rq_forward(const S& u, const S* packed, const SplineConfig& cfg) {
  const Knots<S> kn = make_knots(packed, cfg);
  const std::size_t b = find_bin(kn.x, cfg.bins, value_of(u));
  const S xi = (u - kn.x[b]) / (kn.x[b + 1] - kn.x[b]);
  return rq_bin(kn, b, xi);
}

void check_config(const SplineConfig& cfg, std::size_t packed_size) {
  if (cfg.bins < 1 || cfg.bins > kMaxSplineBins) throw std::invalid_argument("spline bins must be in [1, 16]");
  if (!(cfg.bound > 0.0)) throw std::invalid_argument("spline bound must be positive");
  if (packed_size != cfg.param_count()) {
    throw ShapeError("spline expects " + std::to_string(cfg.param_count()) + " raw parameters, got " +
                     std::to_string(packed_size));
  }
  if (static_cast<double>(cfg.bins) * cfg.min_bin_fraction >= 1.0) {
    throw std::invalid_argument("spline min_bin_fraction too large for the bin count");
  }
}

void check_finite(double v, std::span<const double> packed, const char* who) {
  if (!std::isfinite(v)) throw NumericError(std::string(who) + ": non-finite input");
  for (double p : packed) {
    if (!std::isfinite(p)) throw NumericError(std::string(who) + ": non-finite spline parameter");
  }
}

bool in_tail(double u, const SplineConfig& cfg) { return u <= -cfg.bound || u >= cfg.bound; }

SplineJacobian tail_jacobian(double u, std::size_t n_params) {
  SplineJacobian j;
  j.out = {u, 0.0};
  j.dvalue_dinput = 1.0;
  j.dlogdet_dinput = 0.0;
  j.dvalue_dparams.assign(n_params, 0.0);
  j.dlogdet_dparams.assign(n_params, 0.0);
  return j;
}

}  // namespace

RQSplineParams RQSplineParams::identity(std::size_t bins, double bound) {
  return {std::vector<double>(bins, 0.0), std::vector<double>(bins, 0.0),
          std::vector<double>(bins > 0 ? bins - 1 : 0, 0.0), bound};
}

std::vector<double> RQSplineParams::packed() const {
  std::vector<double> out = widths;
  out.insert(out.end(), heights.begin(), heights.end());
  out.insert(out.end(), log_derivs.begin(), log_derivs.end());
  return out;
}

SplineConfig RQSplineParams::config() const {
  SplineConfig c;
  c.bins = widths.size();
  c.bound = bound;
  return c;
}

std::vector<double> spline_bin_widths(std::span<const double> raw, const SplineConfig& cfg) {
  std::array<double, kMaxSplineBins> w;
  bin_sizes(raw.data(), cfg.bins, cfg, w);
  return {w.begin(), w.begin() + static_cast<std::ptrdiff_t>(cfg.bins)};
}

SplineValue spline_forward(double u, std::span<const double> packed, const SplineConfig& cfg) {
  check_config(cfg, packed.size());
  check_finite(u, packed, "spline_forward");
  if (in_tail(u, cfg)) return {u, 0.0};
  const auto [v, ld] = rq_forward(u, packed.data(), cfg);
  return {v, ld};
}

SplineValue spline_inverse(double v, std::span<const double> packed, const SplineConfig& cfg) {
  check_config(cfg, packed.size());
  check_finite(v, packed, "spline_inverse");
  if (in_tail(v, cfg)) return {v, 0.0};
  const Knots<double> kn = make_knots(packed.data(), cfg);
  const std::size_t b = find_bin(kn.y, cfg.bins, v);
  const double width = kn.x[b + 1] - kn.x[b];
  const double height = kn.y[b + 1] - kn.y[b];
  const double s = height / width;
  const double d0 = kn.delta[b];
  const double d1 = kn.delta[b + 1];
  const double dv = v - kn.y[b];
  const double c2 = d1 + d0 - 2.0 * s;
  const double a = height * (s - d0) + dv * c2;
  const double bq = height * d0 - dv * c2;
  const double c = -s * dv;
  const double disc = std::max(bq * bq - 4.0 * a * c, 0.0);
  double xi = std::clamp(2.0 * c / (-bq - std::sqrt(disc)), 0.0, 1.0);
  // One Newton step on the forward map.
  const auto [f0, ld0] = rq_bin(kn, b, xi);
  xi = std::clamp(xi - (f0 - v) / (width * std::exp(ld0)), 0.0, 1.0);
  const double u = kn.x[b] + xi * width;
  const auto [fv, ld] = rq_bin(kn, b, xi);
  (void)fv;
  if (!std::isfinite(u) || !std::isfinite(ld)) throw NumericError("spline_inverse: non-finite result");
  return {u, -ld};
}

SplineJacobian spline_forward_jacobian(double u, std::span<const double> packed, const SplineConfig& cfg) {
  check_config(cfg, packed.size());
  check_finite(u, packed, "spline_forward");
  const std::size_t np = packed.size();
  if (in_tail(u, cfg)) return tail_jacobian(u, np);

  const std::size_t dims = np + 1;
  Dual du(u, dims);
  du.d[0] = 1.0;
  std::array<Dual, kMaxTangents> dp;
  for (std::size_t i = 0; i < np; ++i) {
    dp[i] = Dual(packed[i], dims);
    dp[i].d[i + 1] = 1.0;
  }
  const auto [v, ld] = rq_forward(du, dp.data(), cfg);

  SplineJacobian j;
  j.out = {v.v, ld.v};
  j.dvalue_dinput = v.d[0];
  j.dlogdet_dinput = ld.d[0];
  j.dvalue_dparams.assign(v.d.begin() + 1, v.d.begin() + static_cast<std::ptrdiff_t>(dims));
  j.dlogdet_dparams.assign(ld.d.begin() + 1, ld.d.begin() + static_cast<std::ptrdiff_t>(dims));
  return j;
}

SplineJacobian spline_inverse_jacobian(double v, std::span<const double> packed, const SplineConfig& cfg) {
  check_config(cfg, packed.size());
  const std::size_t np = packed.size();
  const SplineValue inv = spline_inverse(v, packed, cfg);
  if (in_tail(v, cfg)) return tail_jacobian(v, np);

  // Implicit function theorem on v = g(u, p) at u = g^-1(v, p).
  const SplineJacobian fwd = spline_forward_jacobian(inv.value, packed, cfg);
  const double dudv = 1.0 / fwd.dvalue_dinput;
  SplineJacobian j;
  j.out = inv;
  j.dvalue_dinput = dudv;
  j.dlogdet_dinput = -fwd.dlogdet_dinput * dudv;
  j.dvalue_dparams.resize(np);
  j.dlogdet_dparams.resize(np);
  for (std::size_t i = 0; i < np; ++i) {
    const double dudp = -fwd.dvalue_dparams[i] * dudv;
    j.dvalue_dparams[i] = dudp;
    j.dlogdet_dparams[i] = -(fwd.dlogdet_dparams[i] + fwd.dlogdet_dinput * dudp);
  }
  return j;
}

}  // namespace bsbi
