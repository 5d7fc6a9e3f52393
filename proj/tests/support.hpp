#pragma once

// Shared oracles for the test suite: finite differences, goodness-of-fit
// p-values and random inputs.

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <functional>
#include <vector>

#include "bsbi/nn.hpp"
#include "bsbi/rng.hpp"
#include "bsbi/tensor.hpp"

namespace testsupport {

using bsbi::Tape;
using bsbi::Tensor;
using bsbi::Var;

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline Tensor random_tensor(std::size_t rows, std::size_t cols, bsbi::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between tape gradients of `f` and central
/// differences with step h, over every entry of every input.
inline double max_grad_rel_error(const std::vector<Tensor>& inputs, const ScalarFn& f, double h = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  Var root = f(tape, leaves);
  tape.backward(root);
  std::vector<Tensor> grads;
  for (const Var& v : leaves) grads.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Tensor>& in) {
    Tape t;
    std::vector<Var> l;
    for (const auto& x : in) l.push_back(t.leaf(x));
    return f(t, l).value().item();
  };
  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = probe[i][k];
      probe[i][k] = orig + h;
      const double up = eval(probe);
      probe[i][k] = orig - h;
      const double down = eval(probe);
      probe[i][k] = orig;
      worst = std::max(worst, relative_error(grads[i][k], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

/// Same check against the entries of model parameters: `f` records the
/// objective given the parameters bound on `tape`.
using ParamFn = std::function<Var(Tape&, const std::vector<Var>&)>;
inline double max_param_grad_rel_error(const std::vector<bsbi::Parameter*>& params, const ParamFn& f,
                                       double h = 1e-6) {
  Tape tape;
  const std::vector<Var> bound = bsbi::bind(tape, params);
  Var root = f(tape, bound);
  tape.backward(root);
  std::vector<Tensor> grads;
  for (const Var& v : bound) grads.push_back(tape.grad(v));

  auto eval = [&] {
    Tape t;
    return f(t, bsbi::bind(t, params)).value().item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& value = params[i]->value;
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double orig = value[k];
      value[k] = orig + h;
      const double up = eval();
      value[k] = orig - h;
      const double down = eval();
      value[k] = orig;
      worst = std::max(worst, relative_error(grads[i][k], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

/// Asymptotic Kolmogorov-Smirnov p-value of samples against U(0, 1).
inline double ks_uniform_pvalue(std::vector<double> u) {
  std::sort(u.begin(), u.end());
  const double n = static_cast<double>(u.size());
  double d = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    d = std::max({d, (i + 1) / n - u[i], u[i] - i / n});
  }
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  }
  return std::clamp(p, 0.0, 1.0);
}

/// Pearson chi-squared p-value of counts against expected counts.
inline double chi2_pvalue(const std::vector<double>& observed, const std::vector<double>& expected) {
  double stat = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    stat += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
  }
  boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace testsupport
