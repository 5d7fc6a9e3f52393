#include "bsbi/objectives.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace bsbi {

namespace {

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw std::invalid_argument(std::string(what) + ": empty batch");
}

void require_column(Var v, const char* what) {
  if (v.value().cols() != 1) {
    throw ShapeError(std::string(what) + ": expected a column of logits, got " + v.value().shape_string());
  }
  require_nonempty(v.value().rows(), what);
}

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": joint batch of " + std::to_string(a) + " vs marginal batch of " +
                     std::to_string(b));
  }
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

Var nre_loss(Var logits_joint, Var logits_marginal) {
  require_column(logits_joint, "nre_loss");
  require_column(logits_marginal, "nre_loss");
  require_same_size(logits_joint.value().rows(), logits_marginal.value().rows(), "nre_loss");
  return scale(mean(log_sigmoid(logits_joint)) + mean(log_sigmoid(-logits_marginal)), -0.5);
}

double nre_loss(std::span<const double> logits_joint, std::span<const double> logits_marginal) {
  require_nonempty(logits_joint.size(), "nre_loss");
  require_same_size(logits_joint.size(), logits_marginal.size(), "nre_loss");
  double j = 0.0;
  for (double f : logits_joint) j += stable_log_sigmoid(f);
  double m = 0.0;
  for (double f : logits_marginal) m += stable_log_sigmoid(-f);
  return -0.5 * (j / static_cast<double>(logits_joint.size()) + m / static_cast<double>(logits_marginal.size()));
}

Var nre_c_loss(Var h_y0, Var h_yK, double gamma) {
  const Tensor& a = h_y0.value();
  const Tensor& b = h_yK.value();
  if (a.shape() != b.shape() || a.shape().size() != 2) {
    throw ShapeError("nre_c_loss: class logits " + a.shape_string() + " and " + b.shape_string() + " differ");
  }
  if (!(gamma > 0.0)) throw std::invalid_argument("nre_c_loss: gamma must be positive");
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  require_nonempty(n, "nre_c_loss");
  if (k == 0) throw ShapeError("nre_c_loss: K must be at least 1");
  Tape& tape = h_y0.tape();
  const double log_k = std::log(static_cast<double>(k));
  Var logk_col = tape.constant(Tensor::full(n, 1, log_k));
  // log w(y=0) = log K - lse(log K, h_1..h_K).
  Var lse0 = logsumexp_rows(concat_cols({logk_col, h_y0}));
  Var log_w0 = add_scalar(-lse0, log_k);
  // log w(y=K) = h_K - lse(log K, h_1..h_K) with h_K the joint logit.
  Var lseK = logsumexp_rows(concat_cols({logk_col, h_yK}));
  Var log_wK = select_cols(h_yK, {k - 1}) - lseK;
  return scale(mean(log_w0), -1.0 / (1.0 + gamma)) + scale(mean(log_wK), -gamma / (1.0 + gamma));
}

double nre_c_loss(const Tensor& h_y0, const Tensor& h_yK, double gamma) {
  if (h_y0.shape() != h_yK.shape()) {
    throw ShapeError("nre_c_loss: class logits " + h_y0.shape_string() + " and " + h_yK.shape_string() + " differ");
  }
  if (!(gamma > 0.0)) throw std::invalid_argument("nre_c_loss: gamma must be positive");
  const std::size_t n = h_y0.rows();
  const std::size_t k = h_y0.cols();
  require_nonempty(n, "nre_c_loss");
  const double log_k = std::log(static_cast<double>(k));
  std::vector<double> buf(k + 1);
  double s0 = 0.0;
  double sK = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    buf[0] = log_k;
    for (std::size_t c = 0; c < k; ++c) buf[c + 1] = h_y0(i, c);
    s0 += log_k - logsumexp(buf);
    for (std::size_t c = 0; c < k; ++c) buf[c + 1] = h_yK(i, c);
    sK += h_yK(i, k - 1) - logsumexp(buf);
  }
  const double nn = static_cast<double>(n);
  return -(s0 / nn) / (1.0 + gamma) - gamma * (sK / nn) / (1.0 + gamma);
}

Var npe_loss(Var log_q) {
  require_column(log_q, "npe_loss");
  return -mean(log_q);
}

Var balance_binary(Var logits_joint, Var logits_marginal) {
  require_column(logits_joint, "balance_binary");
  require_column(logits_marginal, "balance_binary");
  return square(add_scalar(mean(sigmoid(logits_marginal)) + mean(sigmoid(logits_joint)), -1.0));
}

double balance_binary(std::span<const double> probs_joint, std::span<const double> probs_marginal) {
  require_nonempty(probs_joint.size(), "balance_binary");
  require_nonempty(probs_marginal.size(), "balance_binary");
  for (auto probs : {probs_joint, probs_marginal}) {
    for (double p : probs) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("balance_binary: probability " + std::to_string(p) + " outside [0, 1]");
      }
    }
  }
  const double d = mean_of(probs_marginal) + mean_of(probs_joint) - 1.0;
  return d * d;
}

Var regularized_loss(Var base, Var balance, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("regularized_loss: lambda must be non-negative");
  if (lambda == 0.0) return base;
  return base + scale(balance, lambda);
}

double regularized_loss(double base, double balance, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("regularized_loss: lambda must be non-negative");
  if (lambda == 0.0) return base;
  return base + lambda * balance;
}

std::vector<double> classifier_from_density(const SurrogateDensity& surrogate, const Tensor& theta,
                                            const Tensor& x) {
  std::vector<double> out = surrogate.log_ratio(theta, x);
  for (double& v : out) {
    if (!std::isfinite(v)) throw NumericError("classifier_from_density: non-finite log ratio");
    v = stable_sigmoid(v);
  }
  return out;
}

double balance_multiclass(const std::vector<Tensor>& probs_by_class) {
  const std::size_t classes = probs_by_class.size();
  if (classes < 2) throw std::invalid_argument("balance_multiclass: need at least two classes");
  std::vector<double> column_mass(classes, 0.0);
  for (std::size_t j = 0; j < classes; ++j) {
    const Tensor& p = probs_by_class[j];
    if (p.rows() == 0) throw std::invalid_argument("balance_multiclass: class " + std::to_string(j) + " is empty");
    if (p.cols() != classes) {
      throw ShapeError("balance_multiclass: class " + std::to_string(j) + " probabilities " + p.shape_string() +
                       " for " + std::to_string(classes) + " classes");
    }
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double total = 0.0;
      for (double v : p.row(r)) {
        if (!(v >= 0.0)) throw std::invalid_argument("balance_multiclass: negative probability");
        total += v;
      }
      if (std::abs(total - 1.0) > 1e-8) {
        throw std::invalid_argument("balance_multiclass: probabilities sum to " + std::to_string(total));
      }
    }
    for (std::size_t i = 0; i < classes; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < p.rows(); ++r) s += p(r, i);
      column_mass[i] += s / static_cast<double>(p.rows());
    }
  }
  double b = 0.0;
  for (double m : column_mass) b += (m - 1.0) * (m - 1.0);
  return b / static_cast<double>(classes);
}

}  // namespace bsbi
