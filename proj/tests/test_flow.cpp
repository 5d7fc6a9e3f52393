#include <algorithm>
#include <cmath>
#include <numbers>

#include "bsbi/flow.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bsbi;
using testsupport::random_tensor;
using testsupport::relative_error;

namespace {

std::vector<double> random_params(const SplineConfig& cfg, Rng& rng, double scale = 1.5) {
  std::vector<double> p(cfg.param_count());
  for (double& v : p) v = rng.normal(0.0, scale);
  return p;
}

FlowConfig small_flow(std::size_t x_dim = 2) {
  FlowConfig c;
  c.theta_dim = 2;
  c.x_dim = x_dim;
  c.hidden = 16;
  return c;
}

Box unit_box() { return Box{{-1.0, -1.0}, {1.0, 1.0}}; }

}  // namespace

TEST_CASE("identity spline parameters") {
  const SplineConfig cfg;
  const RQSplineParams id = RQSplineParams::identity(cfg.bins, cfg.bound);
  for (double p : id.packed()) CHECK(p == 0.0);
  for (double u = -5.0; u <= 5.0; u += 0.01) {
    const SplineValue f = spline_forward(u, id);
    CHECK(f.value == doctest::Approx(u).epsilon(1e-12).scale(1.0));
    CHECK(std::abs(f.log_abs_det) < 1e-12);
    CHECK(spline_inverse(u, id).value == doctest::Approx(u).epsilon(1e-12).scale(1.0));
  }
  CHECK(spline_forward(5.0, id).value == 5.0);
}

TEST_CASE("spline boundary knots, tails and widths") {
  const SplineConfig cfg;
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_params(cfg, rng);
    CHECK(spline_forward(cfg.bound, p, cfg).value == doctest::Approx(cfg.bound).epsilon(1e-14));
    CHECK(spline_forward(-cfg.bound, p, cfg).value == doctest::Approx(-cfg.bound).epsilon(1e-14));
    for (double u : {-9.0, -5.5, 5.0001, 7.25}) {
      const SplineValue f = spline_forward(u, p, cfg);
      CHECK(f.value == u);
      CHECK(f.log_abs_det == 0.0);
    }
    const auto w = spline_bin_widths(std::span<const double>(p).first(cfg.bins), cfg);
    double total = 0.0;
    for (double v : w) {
      total += v;
      CHECK(v >= cfg.min_bin_fraction * 2.0 * cfg.bound * (1.0 - 1e-12));
    }
    CHECK(total == doctest::Approx(2.0 * cfg.bound).epsilon(1e-13));
  }
  CHECK_THROWS_AS(spline_forward(std::nan(""), std::vector<double>(cfg.param_count(), 0.0), cfg), NumericError);
}

TEST_CASE("spline derivative matches finite differences") {
  const SplineConfig cfg;
  Rng rng(2);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const auto p = random_params(cfg, rng);
    const double u = rng.uniform(-4.99, 4.99);
    const double h = 1e-6;
    // The second derivative jumps at knots.
    double knot = -cfg.bound, gap = 1.0;
    for (double w : spline_bin_widths(std::span<const double>(p).first(cfg.bins), cfg)) {
      knot += w;
      gap = std::min(gap, std::abs(u - knot));
    }
    if (gap < 1e-4) continue;
    const double fd = (spline_forward(u + h, p, cfg).value - spline_forward(u - h, p, cfg).value) / (2 * h);
    worst = std::max(worst, relative_error(std::exp(spline_forward(u, p, cfg).log_abs_det), fd));
    CHECK(spline_forward(u + 1e-6, p, cfg).value > spline_forward(u, p, cfg).value);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("spline round trip") {
  const SplineConfig cfg;
  Rng rng(3);
  double worst_u = 0.0, worst_det = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const auto p = random_params(cfg, rng);
    const double u = rng.uniform(-6.0, 6.0);
    const SplineValue f = spline_forward(u, p, cfg);
    const SplineValue b = spline_inverse(f.value, p, cfg);
    worst_u = std::max(worst_u, std::abs(b.value - u));
    worst_det = std::max(worst_det, std::abs(f.log_abs_det + b.log_abs_det));
  }
  CHECK(worst_u < 1e-9);
  CHECK(worst_det < 1e-9);
}

TEST_CASE("spline Jacobians match finite differences") {
  const SplineConfig cfg;
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    auto p = random_params(cfg, rng);
    const double u = rng.uniform(-4.9, 4.9);
    for (bool inverse : {false, true}) {
      auto eval = [&](double x, const std::vector<double>& q) {
        return inverse ? spline_inverse(x, q, cfg) : spline_forward(x, q, cfg);
      };
      const SplineJacobian j = inverse ? spline_inverse_jacobian(u, p, cfg) : spline_forward_jacobian(u, p, cfg);
      const SplineValue v = eval(u, p);
      CHECK(j.out.value == doctest::Approx(v.value).epsilon(1e-13));
      CHECK(j.out.log_abs_det == doctest::Approx(v.log_abs_det).epsilon(1e-12).scale(1.0));
      const double h = 1e-6;
      const SplineValue up = eval(u + h, p), dn = eval(u - h, p);
      CHECK(relative_error(j.dvalue_dinput, (up.value - dn.value) / (2 * h)) < 1e-5);
      CHECK(relative_error(j.dlogdet_dinput, (up.log_abs_det - dn.log_abs_det) / (2 * h)) < 1e-4);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double orig = p[k];
        p[k] = orig + h;
        const SplineValue a = eval(u, p);
        p[k] = orig - h;
        const SplineValue b = eval(u, p);
        p[k] = orig;
        CHECK(relative_error(j.dvalue_dparams[k], (a.value - b.value) / (2 * h)) < 1e-5);
        // Absolute floor: log|det| is large relative to these partials, so the
        // difference quotient carries ~1e-7 of roundoff.
        CHECK(relative_error(j.dlogdet_dparams[k], (a.log_abs_det - b.log_abs_det) / (2 * h), 1e-2) < 1e-4);
      }
    }
  }
}

TEST_CASE("normal helpers and prior map") {
  CHECK(normal_cdf(0.0) == 0.5);
  // The upper tail of the CDF rounds towards 1 in double precision.
  for (double n = -7.5; n <= 5.0; n += 0.25) {
    CHECK(normal_quantile(normal_cdf(n)) == doctest::Approx(n).epsilon(1e-9));
  }
  CHECK(normal_cdf(100.0) < 1.0);
  CHECK(normal_cdf(-100.0) > 0.0);

  const PriorMapTransform map(Box{{-1.0, -3.0}, {1.0, 3.0}});
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const std::vector<double> n{rng.normal(), rng.normal()};
    std::vector<double> theta(2), back(2);
    const double fwd = map.forward(n, theta);
    const double inv = map.inverse(theta, back);
    CHECK(map.box().contains(theta));
    CHECK(back[0] == doctest::Approx(n[0]).epsilon(1e-9));
    CHECK(fwd + inv == doctest::Approx(0.0).epsilon(1e-9).scale(1.0));
    // Diagonal Jacobian against finite differences.
    double fd_logdet = 0.0;
    for (std::size_t d = 0; d < 2; ++d) {
      std::vector<double> a = n, b = n, ta(2), tb(2);
      a[d] += 1e-6;
      b[d] -= 1e-6;
      map.forward(a, ta);
      map.forward(b, tb);
      fd_logdet += std::log((ta[d] - tb[d]) / 2e-6);
    }
    CHECK(fwd == doctest::Approx(fd_logdet).epsilon(1e-6));
  }
}

TEST_CASE("exact-zero flow with prior map is the prior") {
  ConditionalFlow flow(small_flow(), unit_box());
  Rng rng(6);
  flow.init(FlowInit::ExactZero, rng);
  const Tensor theta = random_tensor(10000, 2, rng, -1.0, 1.0);
  const Tensor x = random_tensor(10000, 2, rng, -3.0, 3.0);
  double worst = 0.0;
  for (double lp : flow.log_prob(theta, x)) worst = std::max(worst, std::abs(lp + std::log(4.0)));
  CHECK(worst < 1e-9);

  const Tensor z = random_tensor(10000, 2, rng, -4.0, 4.0);
  const Tensor tz = flow.forward_transforms(z, x);
  double id_err = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) id_err = std::max(id_err, std::abs(tz[i] - z[i]));
  CHECK(id_err < 1e-12);
}

TEST_CASE("scaled-by-5 init is near identity") {
  ConditionalFlow flow(small_flow(), std::nullopt);
  Rng rng(7);
  flow.init(FlowInit::ScaledBy5, rng);
  const Tensor z = random_tensor(2000, 2, rng, -3.0, 3.0);
  const Tensor x = random_tensor(2000, 2, rng, -1.0, 1.0);
  const Tensor tz = flow.forward_transforms(z, x);
  std::vector<double> dev;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    dev.push_back(std::hypot(tz(i, 0) - z(i, 0), tz(i, 1) - z(i, 1)));
  }
  std::nth_element(dev.begin(), dev.begin() + dev.size() / 2, dev.end());
  const double med = dev[dev.size() / 2];
  CHECK(med > 0.0);
  CHECK(med < 0.1 * flow.config().spline.bound);
}

TEST_CASE("flow samples stay in the box and are uniform under identity init") {
  ConditionalFlow flow(small_flow(), unit_box());
  Rng rng(8);
  flow.init(FlowInit::ExactZero, rng);
  const std::vector<double> x{0.3, -0.2};
  const Tensor s = flow.sample(x, rng, 100000);
  const std::size_t bins = 10;
  std::vector<double> counts(bins * bins, 0.0);
  std::size_t outside = 0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    if (!unit_box().contains(s.row(i))) {
      ++outside;
      continue;
    }
    const auto b0 = std::min<std::size_t>(bins - 1, static_cast<std::size_t>((s(i, 0) + 1.0) / 2.0 * bins));
    const auto b1 = std::min<std::size_t>(bins - 1, static_cast<std::size_t>((s(i, 1) + 1.0) / 2.0 * bins));
    counts[b0 * bins + b1] += 1.0;
  }
  CHECK(outside == 0);
  CHECK(testsupport::chi2_pvalue(counts, std::vector<double>(bins * bins, 1000.0)) > 0.01);

  Rng a(3), b(3);
  CHECK(flow.sample(x, a, 50) == flow.sample(x, b, 50));
}

TEST_CASE("random flows are normalized on a quadrature grid") {
  for (bool with_map : {true, false}) {
    ConditionalFlow flow(small_flow(), with_map ? std::optional<Box>(unit_box()) : std::nullopt);
    Rng rng(with_map ? 9 : 10);
    flow.init(FlowInit::Standard, rng);
    const double lo = with_map ? -1.0 : -9.0;
    const double hi = -lo;
    const std::size_t n = 256;
    const double h = (hi - lo) / (n - 1);
    Tensor theta = Tensor::zeros(n * n, 2);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        theta(i * n + j, 0) = lo + i * h;
        theta(i * n + j, 1) = lo + j * h;
      }
    }
    Tensor x = Tensor::zeros(n * n, 2);
    for (std::size_t r = 0; r < x.rows(); ++r) x(r, 0) = 0.4;
    const auto lp = flow.log_prob(theta, x);
    double mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double w = ((i == 0 || i == n - 1) ? 0.5 : 1.0) * ((j == 0 || j == n - 1) ? 0.5 : 1.0);
        mass += w * std::exp(lp[i * n + j]) * h * h;
      }
    }
    CAPTURE(with_map);
    CHECK(mass == doctest::Approx(1.0).epsilon(0.01));
  }
}

TEST_CASE("change of variables: sample log densities equal inverse-pass log_prob") {
  for (bool with_map : {true, false}) {
    ConditionalFlow flow(small_flow(3), with_map ? std::optional<Box>(unit_box()) : std::nullopt);
    Rng rng(11);
    flow.init(FlowInit::Standard, rng);
    const std::vector<double> x{0.1, 0.7, -0.5};
    std::vector<double> lq;
    const Tensor s = flow.sample(x, rng, 500, &lq);
    Tensor xs = Tensor::zeros(500, 3);
    for (std::size_t i = 0; i < 500; ++i) std::copy(x.begin(), x.end(), xs.row(i).begin());
    const auto lp = flow.log_prob(s, xs);
    for (std::size_t i = 0; i < 500; ++i) {
      // Draws mapped onto the box edge by the clamped normal CDF are excluded.
      if (with_map && !unit_box().contains(s.row(i))) continue;
      CHECK(lp[i] == doctest::Approx(lq[i]).epsilon(1e-9).scale(1.0));
    }
    // forward o inverse is the identity.
    const Tensor z = flow.inverse_transforms(s, xs);
    const Tensor back = flow.forward_transforms(z, xs);
    if (!with_map) {
      for (std::size_t i = 0; i < s.size(); ++i) CHECK(back[i] == doctest::Approx(s[i]).epsilon(1e-8).scale(1.0));
    }
  }
}

TEST_CASE("taped and plain log_prob agree; gradients match finite differences") {
  ConditionalFlow flow(small_flow(), unit_box());
  Rng rng(12);
  flow.init(FlowInit::Standard, rng);
  flow.context_normalizer() = Standardizer{{0.1, -0.2}, {1.5, 0.7}};
  const Tensor theta = random_tensor(6, 2, rng, -0.95, 0.95);
  const Tensor x = random_tensor(6, 2, rng);

  Tape tape;
  const auto bound = bsbi::bind(tape, std::as_const(flow).parameters());
  const Tensor taped = flow.log_prob(tape, theta, x, bound).value();
  const auto plain = flow.log_prob(theta, x);
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(taped[i] == doctest::Approx(plain[i]).epsilon(1e-12));

  std::vector<Tensor> params;
  for (const Parameter* p : std::as_const(flow).parameters()) params.push_back(p->value);
  const double err = testsupport::max_grad_rel_error(params, [&](Tape& t, const std::vector<Var>& v) {
    return mean(flow.log_prob(t, theta, x, v));
  });
  CHECK(err < 1e-4);

  Tensor outside = theta;
  outside(0, 0) = 1.5;
  Tape t2;
  const auto b2 = bsbi::bind(t2, std::as_const(flow).parameters());
  CHECK_THROWS_AS(flow.log_prob(t2, outside, x, b2), DomainError);
  CHECK(flow.log_prob(outside, x)[0] == kOutsideSupportLogProb);
}
