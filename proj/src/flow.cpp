#include "bsbi/flow.hpp"

#include <algorithm>
#include <boost/math/special_functions/erf.hpp>
#include <cmath>
#include <numbers>

namespace bsbi {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kQuantileClamp = 8.0;

Tensor repeat_row(std::span<const double> row, std::size_t n) {
  Tensor out = Tensor::zeros(n, row.size());
  for (std::size_t i = 0; i < n; ++i) std::copy(row.begin(), row.end(), out.row(i).begin());
  return out;
}

template <bool Inverse>
Var spline_op(Var values, Var params, const SplineConfig& cfg) {
  const Tensor& v = values.value();
  const Tensor& p = params.value();
  const std::size_t n = v.rows();
  const std::size_t np = cfg.param_count();
  if (v.cols() != 1 || p.rows() != n || p.cols() != np) {
    throw ShapeError(std::string(Inverse ? "spline_inverse_op" : "spline_forward_op") + ": values " +
                     v.shape_string() + " and params " + p.shape_string() + " incompatible");
  }
  Tensor out = Tensor::zeros(n, 2);
  Tensor jac_values = Tensor::zeros(n, 2);
  Tensor jac_params = Tensor::zeros(n, 2 * np);
  for (std::size_t r = 0; r < n; ++r) {
    const SplineJacobian j = Inverse ? spline_inverse_jacobian(v[r], p.row(r), cfg)
                                     : spline_forward_jacobian(v[r], p.row(r), cfg);
    out(r, 0) = j.out.value;
    out(r, 1) = j.out.log_abs_det;
    jac_values(r, 0) = j.dvalue_dinput;
    jac_values(r, 1) = j.dlogdet_dinput;
    for (std::size_t k = 0; k < np; ++k) {
      jac_params(r, k) = j.dvalue_dparams[k];
      jac_params(r, np + k) = j.dlogdet_dparams[k];
    }
  }
  return row_local({values, params}, std::move(out), {std::move(jac_values), std::move(jac_params)},
                   Inverse ? "spline_inverse" : "spline_forward");
}

std::vector<std::size_t> column_range(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = begin + i;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Normal helpers and prior map

double normal_cdf(double n) {
  n = std::clamp(n, -kQuantileClamp, kQuantileClamp);
  return 0.5 * std::erfc(-n / std::numbers::sqrt2);
}

double normal_quantile(double p) {
  const double lo = normal_cdf(-kQuantileClamp);
  if (p <= lo) return -kQuantileClamp;
  if (p >= 1.0 - lo) return kQuantileClamp;
  // Evaluate in the nearer tail for accuracy.
  if (p > 0.5) return std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * (1.0 - p));
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

double normal_log_pdf(double n) { return -0.5 * n * n - 0.5 * kLog2Pi; }

double PriorMapTransform::forward(std::span<const double> n, std::span<double> theta) const {
  double log_det = 0.0;
  for (std::size_t d = 0; d < box_.dim(); ++d) {
    const double nc = std::clamp(n[d], -kQuantileClamp, kQuantileClamp);
    const double width = box_.upper[d] - box_.lower[d];
    theta[d] = box_.lower[d] + width * normal_cdf(nc);
    log_det += normal_log_pdf(nc) + std::log(width);
  }
  return log_det;
}

double PriorMapTransform::inverse(std::span<const double> theta, std::span<double> n) const {
  double log_det = 0.0;
  for (std::size_t d = 0; d < box_.dim(); ++d) {
    const double width = box_.upper[d] - box_.lower[d];
    const double u01 = (theta[d] - box_.lower[d]) / width;
    n[d] = normal_quantile(u01);
    log_det -= normal_log_pdf(n[d]) + std::log(width);
  }
  return log_det;
}

// ---------------------------------------------------------------------------
// Coupling layers

CouplingLayer::CouplingLayer(std::size_t index, const FlowConfig& cfg) {
  for (std::size_t d = 0; d < cfg.theta_dim; ++d) {
    if (cfg.theta_dim == 1 || d % 2 == index % 2) {
      transformed_.push_back(d);
    } else {
      passthrough_.push_back(d);
    }
  }
  conditioner_ = Mlp("flow.t" + std::to_string(index), passthrough_.size() + cfg.x_dim, cfg.hidden,
                     cfg.conditioner_layers, transformed_.size() * cfg.spline.param_count());
}

// ---------------------------------------------------------------------------
// Flow

ConditionalFlow::ConditionalFlow(FlowConfig cfg, std::optional<Box> prior_box)
    : cfg_(cfg), context_(Standardizer::identity(cfg.x_dim)) {
  if (cfg_.theta_dim == 0 || cfg_.transforms == 0) throw std::invalid_argument("flow needs dims and transforms");
  if (prior_box) {
    if (prior_box->dim() != cfg_.theta_dim) throw ShapeError("prior box dimension differs from theta_dim");
    prior_map_ = PriorMapTransform(*prior_box);
  }
  for (std::size_t i = 0; i < cfg_.transforms; ++i) layers_.emplace_back(i, cfg_);
}

void ConditionalFlow::init(FlowInit scheme, Rng& rng) {
  for (auto& layer : layers_) {
    layer.conditioner().init_fan_in(rng);
    if (scheme == FlowInit::ExactZero) layer.conditioner().zero_output_layer();
    if (scheme == FlowInit::ScaledBy5) layer.conditioner().shrink(5.0);
  }
}

std::vector<Parameter*> ConditionalFlow::parameters() {
  std::vector<Parameter*> out;
  for (auto& layer : layers_) {
    auto p = layer.conditioner().parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<const Parameter*> ConditionalFlow::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& layer : layers_) {
    auto p = layer.conditioner().parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Tensor ConditionalFlow::context(const Tensor& x) const { return context_.apply(x); }

Var ConditionalFlow::log_prob(Tape& tape, const Tensor& theta, const Tensor& x,
                              const std::vector<Var>& bound) const {
  const std::size_t n = theta.rows();
  const std::size_t dim = cfg_.theta_dim;
  if (theta.cols() != dim || x.rows() != n || x.cols() != cfg_.x_dim) {
    throw ShapeError("flow log_prob: theta " + theta.shape_string() + " and x " + x.shape_string() +
                     " incompatible with the flow");
  }
  const std::size_t per_layer = 2 * cfg_.conditioner_layers;
  if (bound.size() != per_layer * layers_.size()) throw std::invalid_argument("flow log_prob: wrong bound count");

  Tensor start = theta;
  Tensor const_logdet = Tensor::zeros(n, 1);
  if (prior_map_) {
    for (std::size_t r = 0; r < n; ++r) {
      if (!prior_map_->box().contains(theta.row(r))) {
        throw DomainError("flow log_prob: training parameter outside the prior box");
      }
      const_logdet[r] = prior_map_->inverse(theta.row(r), start.row(r));
    }
  }

  Var state = tape.constant(std::move(start));
  Var ctx = tape.constant(context(x));
  Var log_det = tape.constant(std::move(const_logdet));
  const std::size_t np = cfg_.spline.param_count();

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const CouplingLayer& layer = layers_[li];
    std::vector<Var> layer_bound(bound.begin() + static_cast<std::ptrdiff_t>(li * per_layer),
                                 bound.begin() + static_cast<std::ptrdiff_t>((li + 1) * per_layer));
    Var cond_in = layer.passthrough().empty() ? ctx : concat_cols({select_cols(state, layer.passthrough()), ctx});
    Var raw = layer.conditioner().forward(cond_in, layer_bound);

    std::vector<Var> columns(dim);
    for (std::size_t d : layer.passthrough()) columns[d] = select_cols(state, {d});
    for (std::size_t k = 0; k < layer.transformed().size(); ++k) {
      const std::size_t d = layer.transformed()[k];
      Var out = spline_inverse_op(select_cols(state, {d}), select_cols(raw, column_range(k * np, np)), cfg_.spline);
      columns[d] = select_cols(out, {0});
      log_det = log_det + select_cols(out, {1});
    }
    state = dim == 1 ? columns[0] : concat_cols(columns);
  }

  Var base = add_scalar(scale(sum_cols(square(state)), -0.5), -0.5 * static_cast<double>(dim) * kLog2Pi);
  return base + log_det;
}

Tensor ConditionalFlow::forward_transforms(const Tensor& z, const Tensor& x, std::vector<double>* log_dets) const {
  const Tensor ctx = context(x);
  Tensor state = z;
  if (log_dets) log_dets->assign(z.rows(), 0.0);
  for (const CouplingLayer& layer : layers_) {
    Tensor cond = Tensor::zeros(z.rows(), layer.passthrough().size() + cfg_.x_dim);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      std::size_t c = 0;
      for (std::size_t d : layer.passthrough()) cond(r, c++) = state(r, d);
      for (std::size_t j = 0; j < cfg_.x_dim; ++j) cond(r, c++) = ctx(r, j);
    }
    const Tensor raw = layer.conditioner().evaluate(cond);
    const std::size_t np = cfg_.spline.param_count();
    for (std::size_t r = 0; r < z.rows(); ++r) {
      for (std::size_t k = 0; k < layer.transformed().size(); ++k) {
        const std::size_t d = layer.transformed()[k];
        const SplineValue sv = spline_forward(state(r, d), raw.row(r).subspan(k * np, np), cfg_.spline);
        state(r, d) = sv.value;
        if (log_dets) (*log_dets)[r] += sv.log_abs_det;
      }
    }
  }
  return state;
}

Tensor ConditionalFlow::inverse_transforms(const Tensor& y, const Tensor& x, std::vector<double>* log_dets) const {
  const Tensor ctx = context(x);
  Tensor state = y;
  if (log_dets) log_dets->assign(y.rows(), 0.0);
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const CouplingLayer& layer = layers_[li];
    Tensor cond = Tensor::zeros(y.rows(), layer.passthrough().size() + cfg_.x_dim);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      std::size_t c = 0;
      for (std::size_t d : layer.passthrough()) cond(r, c++) = state(r, d);
      for (std::size_t j = 0; j < cfg_.x_dim; ++j) cond(r, c++) = ctx(r, j);
    }
    const Tensor raw = layer.conditioner().evaluate(cond);
    const std::size_t np = cfg_.spline.param_count();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      for (std::size_t k = 0; k < layer.transformed().size(); ++k) {
        const std::size_t d = layer.transformed()[k];
        const SplineValue sv = spline_inverse(state(r, d), raw.row(r).subspan(k * np, np), cfg_.spline);
        state(r, d) = sv.value;
        if (log_dets) (*log_dets)[r] += sv.log_abs_det;
      }
    }
  }
  return state;
}

std::vector<double> ConditionalFlow::log_prob(const Tensor& theta, const Tensor& x) const {
  const std::size_t n = theta.rows();
  const std::size_t dim = cfg_.theta_dim;
  if (theta.cols() != dim || x.rows() != n || x.cols() != cfg_.x_dim) {
    throw ShapeError("flow log_prob: theta " + theta.shape_string() + " and x " + x.shape_string() +
                     " incompatible with the flow");
  }
  std::vector<double> out(n, 0.0);
  std::vector<bool> outside(n, false);
  Tensor start = theta;
  if (prior_map_) {
    for (std::size_t r = 0; r < n; ++r) {
      if (!prior_map_->box().contains(theta.row(r))) {
        outside[r] = true;
        auto row = start.row(r);
        std::fill(row.begin(), row.end(), 0.0);
        continue;
      }
      out[r] = prior_map_->inverse(theta.row(r), start.row(r));
    }
  }
  std::vector<double> log_dets;
  const Tensor z = inverse_transforms(start, x, &log_dets);
  for (std::size_t r = 0; r < n; ++r) {
    if (outside[r]) {
      out[r] = kOutsideSupportLogProb;
      continue;
    }
    double base = 0.0;
    for (double v : z.row(r)) base += normal_log_pdf(v);
    out[r] += base + log_dets[r];
    if (!std::isfinite(out[r])) throw NumericError("flow log_prob: non-finite density");
  }
  return out;
}

Tensor ConditionalFlow::sample(std::span<const double> x, Rng& rng, std::size_t n,
                               std::vector<double>* log_probs) const {
  const std::size_t dim = cfg_.theta_dim;
  Tensor z = Tensor::zeros(n, dim);
  for (double& v : z.data()) v = rng.normal();
  std::vector<double> log_dets;
  Tensor state = forward_transforms(z, repeat_row(x, n), log_probs ? &log_dets : nullptr);
  if (log_probs) {
    log_probs->assign(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      double base = 0.0;
      for (double v : z.row(r)) base += normal_log_pdf(v);
      (*log_probs)[r] = base - log_dets[r];
    }
  }
  if (prior_map_) {
    Tensor theta = Tensor::zeros(n, dim);
    for (std::size_t r = 0; r < n; ++r) {
      const double ld = prior_map_->forward(state.row(r), theta.row(r));
      if (log_probs) (*log_probs)[r] -= ld;
    }
    state = std::move(theta);
  }
  if (!state.all_finite()) throw NumericError("flow sample: non-finite draw");
  return state;
}

Var spline_inverse_op(Var values, Var params, const SplineConfig& cfg) {
  return spline_op<true>(values, params, cfg);
}

Var spline_forward_op(Var values, Var params, const SplineConfig& cfg) {
  return spline_op<false>(values, params, cfg);
}

}  // namespace bsbi
