#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "bsbi/objectives.hpp"
#include "bsbi/simulators.hpp"
#include "bsbi/surrogate.hpp"

namespace bsbi {

enum class Algorithm { NRE, BNRE, NREC, BNREC, NPE, BNPE, BNPEInit, RNPE };

/// "NRE", "BNRE", "NRE-C", "BNRE-C", "NPE", "BNPE", "BNPE-Init", "RNPE".
std::string algorithm_name(Algorithm a);
/// Case-insensitive inverse of algorithm_name; throws on unknown names.
Algorithm parse_algorithm(const std::string& name);
std::vector<Algorithm> all_algorithms();

bool is_balanced(Algorithm a);
bool is_flow_based(Algorithm a);
bool is_contrastive(Algorithm a);

struct TrainConfig {
  Algorithm algorithm = Algorithm::NRE;
  double lambda = 100.0;
  double gamma = 1.0;
  std::size_t K = 5;
  double lr = 1e-3;
  std::size_t batch = 256;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;
  double lr_factor = 10.0;
  /// Training stops once the scheduled learning rate falls below this; 0
  /// never stops early.
  double min_lr = 0.0;

  /// Lambda actually applied: 0 for unbalanced algorithms.
  double effective_lambda() const { return is_balanced(algorithm) ? lambda : 0.0; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct ModelConfig {
  std::size_t classifier_hidden = 256;
  /// Linear maps in the classifier MLP.
  std::size_t classifier_layers = 6;
  std::size_t flow_transforms = 3;
  std::size_t flow_hidden = 256;
  std::size_t flow_conditioner_layers = 3;
  SplineConfig spline;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  /// Balance criterion of the current model on the validation split.
  double balance = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;

  /// epoch,train_loss,val_loss,balance_B,lr
  std::string csv() const;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what);
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct TrainResult {
  std::unique_ptr<SurrogateDensity> surrogate;
  TrainLog log;
};

/// Untrained surrogate for `algorithm`, initialized from `rng` with input
/// standardizers fitted on `train`.
std::unique_ptr<SurrogateDensity> make_surrogate(Algorithm algorithm, const TaskDefinition& task,
                                                 const ModelConfig& model, const Split& train, Rng& rng);

/// Objective of `surrogate` on one batch: the algorithm's base loss plus
/// lambda times the balance term, with marginal pairs formed from `perm`.
struct BatchObjective {
  Var loss;
  Var balance;
};
BatchObjective batch_objective(const TrainConfig& cfg, const SurrogateDensity& surrogate, const TaskDefinition& task,
                               Tape& tape, const std::vector<Var>& bound, const Tensor& theta, const Tensor& x,
                               const std::vector<std::size_t>& perm);

/// Trainable parameters of a ratio or flow surrogate.
std::vector<Parameter*> trainable_parameters(SurrogateDensity& surrogate);

/// Adam with plateau schedule and best-validation checkpointing. `rng`
/// seeds initialization and shuffling through separate child streams.
TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Dataset& data, const TaskDefinition& task,
                  const Rng& rng);

}  // namespace bsbi
