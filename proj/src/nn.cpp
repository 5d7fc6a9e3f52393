#include "bsbi/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace bsbi {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

ConstMap view(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
}  // namespace

Mlp::Mlp(std::string name, std::size_t in, std::size_t hidden, std::size_t layers, std::size_t out,
         Activation act)
    : name_(std::move(name)), in_(in), hidden_(hidden), out_(out), act_(act) {
  if (layers < 1) throw std::invalid_argument("Mlp needs at least one layer");
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t fan_in = l == 0 ? in : hidden;
    const std::size_t fan_out = l + 1 == layers ? out : hidden;
    const std::string prefix = name_ + ".layer" + std::to_string(l);
    weights_.push_back({prefix + ".weight", Tensor::zeros(fan_in, fan_out)});
    biases_.push_back({prefix + ".bias", Tensor::zeros(1, fan_out)});
  }
}

void Mlp::init_fan_in(Rng& rng) {
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(weights_[l].value.rows()));
    for (double& w : weights_[l].value.data()) w = rng.uniform(-bound, bound);
    for (double& b : biases_[l].value.data()) b = rng.uniform(-bound, bound);
  }
}

void Mlp::zero_output_layer() {
  for (double& w : weights_.back().value.data()) w = 0.0;
  for (double& b : biases_.back().value.data()) b = 0.0;
}

void Mlp::shrink(double factor) {
  for (auto& w : weights_) {
    for (double& v : w.value.data()) v /= factor;
  }
  for (auto& b : biases_) {
    for (double& v : b.value.data()) v = 0.0;
  }
}

Var Mlp::forward(Var x, const std::vector<Var>& bound) const {
  if (bound.size() != 2 * weights_.size()) {
    throw std::invalid_argument(name_ + ": expected " + std::to_string(2 * weights_.size()) +
                                " bound parameters, got " + std::to_string(bound.size()));
  }
  Var h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = affine(h, bound[2 * l], bound[2 * l + 1]);
    if (l + 1 < weights_.size()) h = act_ == Activation::Relu ? relu(h) : tanh(h);
  }
  return h;
}

Tensor Mlp::evaluate(const Tensor& x) const {
  if (x.cols() != in_) {
    throw ShapeError(name_ + ": input shape " + x.shape_string() + " incompatible with weight shape " +
                     weights_.front().value.shape_string());
  }
  RowMat h = view(x);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    RowMat next = h * view(weights_[l].value);
    next.rowwise() += view(biases_[l].value).row(0);
    if (l + 1 < weights_.size()) {
      next = act_ == Activation::Relu ? RowMat(next.cwiseMax(0.0)) : RowMat(next.array().tanh());
    }
    h = std::move(next);
  }
  Tensor out = Tensor::zeros(static_cast<std::size_t>(h.rows()), static_cast<std::size_t>(h.cols()));
  Eigen::Map<RowMat>(out.data().data(), h.rows(), h.cols()) = h;
  if (!out.all_finite()) throw NumericError(name_ + ": non-finite output");
  return out;
}

std::vector<Parameter*> Mlp::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<const Parameter*> Mlp::parameters() const {
  std::vector<const Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<Var> bind(Tape& tape, const std::vector<Parameter*>& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(tape.leaf(p->value));
  return out;
}

std::vector<Var> bind(Tape& tape, const std::vector<const Parameter*>& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(tape.leaf(p->value));
  return out;
}

AdamState make_adam(const std::vector<Parameter*>& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const Parameter* p : params) {
    s.m.emplace_back(p->value.shape(), std::vector<double>(p->value.size(), 0.0));
    s.v.emplace_back(p->value.shape(), std::vector<double>(p->value.size(), 0.0));
  }
  return s;
}

void adam_step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads, AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients and " + std::to_string(state.m.size()) +
                     " moment buffers");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i]->value;
    if (grads[i].shape() != p.shape() || state.m[i].shape() != p.shape()) {
      throw ShapeError("adam_step: parameter '" + params[i]->name + "' has shape " + p.shape_string() +
                       " but gradient has shape " + grads[i].shape_string());
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->value.data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

Standardizer Standardizer::identity(std::size_t dim) {
  return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
}

Standardizer Standardizer::fit(const Tensor& samples) {
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  Standardizer s = identity(d);
  if (n < 2) return s;
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += samples(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (samples(i, j) - mu) * (samples(i, j) - mu);
    var /= static_cast<double>(n - 1);
    s.mean[j] = mu;
    s.scale[j] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Tensor Standardizer::apply(const Tensor& samples) const {
  if (samples.cols() != mean.size()) {
    throw ShapeError("standardizer of width " + std::to_string(mean.size()) + " applied to " +
                     samples.shape_string());
  }
  Tensor out = samples;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = (out(i, j) - mean[j]) / scale[j];
  }
  return out;
}

}  // namespace bsbi
