#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "bsbi/flow.hpp"
#include "bsbi/nn.hpp"
#include "bsbi/simulators.hpp"

namespace bsbi {

/// Classifier network f(theta, x) (or h for the contrastive variant) on
/// standardized inputs; its single output is an unconstrained logit.
struct ClassifierHead {
  Mlp mlp;
  Standardizer theta_norm;
  Standardizer x_norm;

  ClassifierHead() = default;
  ClassifierHead(std::size_t theta_dim, std::size_t x_dim, std::size_t hidden, std::size_t layers);

  std::size_t theta_dim() const { return theta_norm.mean.size(); }
  std::size_t x_dim() const { return x_norm.mean.size(); }

  /// Logits per row (n x 1) on the tape.
  Var logits(Tape& tape, const Tensor& theta, const Tensor& x, const std::vector<Var>& bound) const;
  std::vector<double> logits(const Tensor& theta, const Tensor& x) const;
};

/// Uniform interface over every trained (or reference) posterior surrogate.
class SurrogateDensity {
 public:
  enum class Kind { RatioBased, FlowBased, Reference };

  virtual ~SurrogateDensity() = default;

  virtual Kind kind() const = 0;
  virtual const PriorSpec& prior() const = 0;
  /// log_unnorm integrates to one over theta for every x.
  virtual bool normalized() const = 0;
  virtual bool sampleable() const = 0;

  /// log q(theta | x) up to a theta-independent constant, one value per row.
  virtual std::vector<double> log_unnorm(const Tensor& theta, const Tensor& x) const = 0;
  /// log q(theta | x) - log p(theta): the logit of the density-based
  /// classifier. Requires theta inside the prior support.
  virtual std::vector<double> log_ratio(const Tensor& theta, const Tensor& x) const;
  /// Draws n parameters from q(. | x); `log_q` receives their log densities.
  virtual Tensor sample(std::span<const double> x, Rng& rng, std::size_t n, std::vector<double>* log_q) const;
};

class RatioSurrogate final : public SurrogateDensity {
 public:
  RatioSurrogate(ClassifierHead head, PriorSpec prior) : head_(std::move(head)), prior_(std::move(prior)) {}

  Kind kind() const override { return Kind::RatioBased; }
  const PriorSpec& prior() const override { return prior_; }
  bool normalized() const override { return false; }
  bool sampleable() const override { return false; }
  /// f(theta, x) + log p(theta).
  std::vector<double> log_unnorm(const Tensor& theta, const Tensor& x) const override;
  /// f(theta, x) itself.
  std::vector<double> log_ratio(const Tensor& theta, const Tensor& x) const override;

  const ClassifierHead& head() const { return head_; }
  ClassifierHead& head() { return head_; }

 private:
  ClassifierHead head_;
  PriorSpec prior_;
};

class FlowSurrogate final : public SurrogateDensity {
 public:
  FlowSurrogate(ConditionalFlow flow, PriorSpec prior) : flow_(std::move(flow)), prior_(std::move(prior)) {}

  Kind kind() const override { return Kind::FlowBased; }
  const PriorSpec& prior() const override { return prior_; }
  bool normalized() const override { return true; }
  bool sampleable() const override { return true; }
  std::vector<double> log_unnorm(const Tensor& theta, const Tensor& x) const override;
  Tensor sample(std::span<const double> x, Rng& rng, std::size_t n, std::vector<double>* log_q) const override;

  const ConditionalFlow& flow() const { return flow_; }
  ConditionalFlow& flow() { return flow_; }

 private:
  ConditionalFlow flow_;
  PriorSpec prior_;
};

/// The prior itself used as a posterior surrogate (ignores x).
class PriorSurrogate final : public SurrogateDensity {
 public:
  explicit PriorSurrogate(PriorSpec prior) : prior_(std::move(prior)) {}

  Kind kind() const override { return Kind::Reference; }
  const PriorSpec& prior() const override { return prior_; }
  bool normalized() const override { return true; }
  bool sampleable() const override { return true; }
  std::vector<double> log_unnorm(const Tensor& theta, const Tensor& x) const override;
  std::vector<double> log_ratio(const Tensor& theta, const Tensor& x) const override;
  Tensor sample(std::span<const double> x, Rng& rng, std::size_t n, std::vector<double>* log_q) const override;

 private:
  PriorSpec prior_;
};

/// Closed-form Gaussian posterior of a task that provides one.
class AnalyticSurrogate final : public SurrogateDensity {
 public:
  explicit AnalyticSurrogate(const TaskDefinition& task);

  Kind kind() const override { return Kind::Reference; }
  const PriorSpec& prior() const override { return prior_; }
  bool normalized() const override { return true; }
  bool sampleable() const override { return true; }
  std::vector<double> log_unnorm(const Tensor& theta, const Tensor& x) const override;
  Tensor sample(std::span<const double> x, Rng& rng, std::size_t n, std::vector<double>* log_q) const override;

 private:
  PriorSpec prior_;
  std::function<GaussianPosterior(std::span<const double>)> posterior_;
};

/// Persists a ratio or flow surrogate trained on `task` in the BSBI envelope.
void save_checkpoint(const std::filesystem::path& path, const SurrogateDensity& surrogate, const std::string& task);

struct LoadedCheckpoint {
  std::string task;
  std::unique_ptr<SurrogateDensity> surrogate;
};

/// Throws FormatError on bad magic, version or payload.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bsbi
