#pragma once

#include <string>
#include <vector>

#include "bsbi/rng.hpp"
#include "bsbi/tensor.hpp"

namespace bsbi {

struct Parameter {
  std::string name;
  Tensor value;
};

using ParameterList = std::vector<Parameter>;

enum class Activation { Relu, Tanh };

/// Multi-layer perceptron. `layers` counts linear maps, so layers=6 is
/// in -> hidden, 4 x (hidden -> hidden), hidden -> out.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, std::size_t in, std::size_t hidden, std::size_t layers, std::size_t out,
      Activation act = Activation::Relu);

  /// Fan-in scaled uniform init: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void init_fan_in(Rng& rng);
  /// Final layer weights and biases set to zero.
  void zero_output_layer();
  /// Divides every weight matrix by `factor` and zeroes every bias.
  void shrink(double factor);

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t layers() const { return weights_.size(); }
  Activation activation() const { return act_; }

  /// Records the forward pass. `bound` are tape handles for parameters(), in
  /// order, as returned by bind().
  Var forward(Var x, const std::vector<Var>& bound) const;
  /// Tape-free evaluation, rows of `x` are samples.
  Tensor evaluate(const Tensor& x) const;

  /// Weight/bias pairs in layer order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  std::string name_;
  std::size_t in_ = 0;
  std::size_t hidden_ = 0;
  std::size_t out_ = 0;
  Activation act_ = Activation::Relu;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
};

/// Adds every parameter to `tape` as a gradient leaf.
std::vector<Var> bind(Tape& tape, const std::vector<Parameter*>& params);
std::vector<Var> bind(Tape& tape, const std::vector<const Parameter*>& params);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(const std::vector<Parameter*>& params, double lr);

/// Bias-corrected Adam update in place. Throws ShapeError if `grads` or the
/// moment buffers are not congruent with `params`.
void adam_step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads, AdamState& state);

/// Per-feature affine standardization fitted on training data.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer identity(std::size_t dim);
  static Standardizer fit(const Tensor& samples);
  Tensor apply(const Tensor& samples) const;
};

}  // namespace bsbi
