#pragma once

// Training losses and balance criteria.
//
// Tape versions take logits (or log densities) already recorded on the tape
// so each algorithm composes them the same way; the plain versions serve the
// diagnostics and tests.

#include <span>
#include <vector>

#include "bsbi/surrogate.hpp"
#include "bsbi/tensor.hpp"

namespace bsbi {

/// Binary cross-entropy with equal class weights:
/// -1/2 [mean log sigma(f_joint) + mean log sigma(-f_marginal)].
Var nre_loss(Var logits_joint, Var logits_marginal);
double nre_loss(std::span<const double> logits_joint, std::span<const double> logits_marginal);

/// Contrastive loss over K + 1 classes. `h_y0` (N x K) are the logits of the
/// K contrastive parameters paired with each x; `h_yK` (N x K) holds K - 1
/// contrastive logits followed, in the last column, by the joint logit.
Var nre_c_loss(Var h_y0, Var h_yK, double gamma);
double nre_c_loss(const Tensor& h_y0, const Tensor& h_yK, double gamma);

/// Mean negative log density over joint pairs.
Var npe_loss(Var log_q);

/// (mean sigma(f_marginal) + mean sigma(f_joint) - 1)^2 from logits.
Var balance_binary(Var logits_joint, Var logits_marginal);
/// Same from classifier probabilities in [0, 1].
double balance_binary(std::span<const double> probs_joint, std::span<const double> probs_marginal);

/// base + lambda * balance; lambda = 0 returns `base` itself.
Var regularized_loss(Var base, Var balance, double lambda);
double regularized_loss(double base, double balance, double lambda);

/// sigma(log q(theta|x) - log p(theta)) per row. For ratio surrogates the
/// logit is f(theta, x) itself.
std::vector<double> classifier_from_density(const SurrogateDensity& surrogate, const Tensor& theta,
                                            const Tensor& x);

/// Multiclass balance over K + 1 classes with uniform class marginal.
/// `probs_by_class[j]` holds, for samples drawn from class j, one row of
/// K + 1 class probabilities each.
double balance_multiclass(const std::vector<Tensor>& probs_by_class);

}  // namespace bsbi
