#include "bsbi/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace bsbi {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

void check_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(op, a, b);
}

Var record(OpKind op, std::vector<Var> parents, Tensor value, std::vector<Tensor> saved = {},
           double scalar = 0.0, std::vector<std::size_t> indices = {}) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output in op '") + op_name(op) + "'");
  }
  Tape& tape = parents.front().tape();
  TapeNode node;
  node.op = op;
  node.value = std::move(value);
  node.saved = std::move(saved);
  node.scalar = scalar;
  node.indices = std::move(indices);
  for (const Var& p : parents) {
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || p.requires_grad();
  }
  return tape.push(std::move(node));
}

template <typename F>
Tensor map_values(const Tensor& in, F f) {
  Tensor out = in;
  for (double& v : out.data()) v = f(v);
  return out;
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  const std::size_t n =
      std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  if (n != data_.size()) {
    throw ShapeError("tensor shape " + bsbi::shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return full(rows, cols, 0.0); }

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value) {
  return Tensor({rows, cols}, std::vector<double>(rows * cols, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const { return shape_.empty() ? 1 : shape_[0]; }

std::size_t Tensor::cols() const {
  if (shape_.size() <= 1) return 1;
  return std::accumulate(shape_.begin() + 1, shape_.end(), std::size_t{1}, std::multiplies<>());
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const { return bsbi::shape_string(shape_); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::AddRowVector: return "add_row_vector";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::LogSigmoid: return "log_sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Square: return "square";
    case OpKind::LogSumExpRows: return "logsumexp_rows";
    case OpKind::SumAll: return "sum";
    case OpKind::MeanAll: return "mean";
    case OpKind::SumCols: return "sum_cols";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::SelectCols: return "select_cols";
    case OpKind::Reshape: return "reshape";
    case OpKind::RowLocal: return "row_local";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape().node(id_).value; }

Tape& Var::tape() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return *tape_;
}

bool Var::requires_grad() const { return tape().node(id_).requires_grad; }

Var Tape::leaf(Tensor value) {
  TapeNode node;
  node.value = std::move(value);
  node.requires_grad = true;
  return push(std::move(node));
}

Var Tape::constant(Tensor value) {
  TapeNode node;
  node.value = std::move(value);
  return push(std::move(node));
}

Var Tape::push(TapeNode node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::clear() {
  nodes_.clear();
  grads_.clear();
}

Tensor Tape::grad(Var v) const {
  const auto id = static_cast<std::size_t>(v.id());
  if (id < grads_.size() && !grads_[id].empty()) return grads_[id];
  const Tensor& value = nodes_.at(id).value;
  return Tensor(value.shape(), std::vector<double>(value.size(), 0.0));
}

void Tape::backward(Var root) {
  const Tensor& rv = root.value();
  if (rv.size() != 1) throw ShapeError("backward() needs a scalar root, got " + rv.shape_string());
  grads_.assign(nodes_.size(), Tensor());
  grads_[static_cast<std::size_t>(root.id())] = Tensor(rv.shape(), {1.0});

  auto grad_slot = [&](int id) -> Tensor* {
    const auto i = static_cast<std::size_t>(id);
    if (!nodes_[i].requires_grad) return nullptr;
    if (grads_[i].empty()) {
      grads_[i] = Tensor(nodes_[i].value.shape(), std::vector<double>(nodes_[i].value.size(), 0.0));
    }
    return &grads_[i];
  };

  for (int id = root.id(); id >= 0; --id) {
    const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
    const Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty() || n.op == OpKind::Leaf) continue;
    const auto& p = n.parents;

    switch (n.op) {
      case OpKind::MatMul: {
        const Tensor& a = nodes_[p[0]].value;
        const Tensor& b = nodes_[p[1]].value;
        if (Tensor* ga = grad_slot(p[0])) as_matrix(*ga).noalias() += as_matrix(g) * as_matrix(b).transpose();
        if (Tensor* gb = grad_slot(p[1])) as_matrix(*gb).noalias() += as_matrix(a).transpose() * as_matrix(g);
        break;
      }
      case OpKind::AddRowVector: {
        if (Tensor* ga = grad_slot(p[0])) accumulate(*ga, g);
        if (Tensor* gb = grad_slot(p[1])) as_matrix(*gb) += as_matrix(g).colwise().sum();
        break;
      }
      case OpKind::Add:
        if (Tensor* ga = grad_slot(p[0])) accumulate(*ga, g);
        if (Tensor* gb = grad_slot(p[1])) accumulate(*gb, g);
        break;
      case OpKind::Sub:
        if (Tensor* ga = grad_slot(p[0])) accumulate(*ga, g);
        if (Tensor* gb = grad_slot(p[1])) as_matrix(*gb) -= as_matrix(g);
        break;
      case OpKind::Mul: {
        const Tensor& a = nodes_[p[0]].value;
        const Tensor& b = nodes_[p[1]].value;
        if (Tensor* ga = grad_slot(p[0])) as_matrix(*ga) += as_matrix(g).cwiseProduct(as_matrix(b));
        if (Tensor* gb = grad_slot(p[1])) as_matrix(*gb) += as_matrix(g).cwiseProduct(as_matrix(a));
        break;
      }
      case OpKind::Scale:
        if (Tensor* ga = grad_slot(p[0])) as_matrix(*ga) += n.scalar * as_matrix(g);
        break;
      case OpKind::AddScalar:
        if (Tensor* ga = grad_slot(p[0])) accumulate(*ga, g);
        break;
      case OpKind::Tanh:
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        }
        break;
      case OpKind::Relu:
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += n.value[i] > 0.0 ? g[i] : 0.0;
        }
        break;
      case OpKind::Sigmoid:
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
        }
        break;
      case OpKind::LogSigmoid: {
        const Tensor& a = nodes_[p[0]].value;
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * stable_sigmoid(-a[i]);
        }
        break;
      }
      case OpKind::Exp:
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * n.value[i];
        }
        break;
      case OpKind::Square: {
        const Tensor& a = nodes_[p[0]].value;
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * g[i] * a[i];
        }
        break;
      }
      case OpKind::LogSumExpRows: {
        const Tensor& a = nodes_[p[0]].value;
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t r = 0; r < a.rows(); ++r) {
            for (std::size_t c = 0; c < a.cols(); ++c) {
              (*ga)(r, c) += g[r] * std::exp(a(r, c) - n.value[r]);
            }
          }
        }
        break;
      }
      case OpKind::SumAll:
        if (Tensor* ga = grad_slot(p[0])) {
          for (double& v : ga->data()) v += g[0];
        }
        break;
      case OpKind::MeanAll:
        if (Tensor* ga = grad_slot(p[0])) {
          const double s = g[0] / static_cast<double>(ga->size());
          for (double& v : ga->data()) v += s;
        }
        break;
      case OpKind::SumCols:
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t r = 0; r < ga->rows(); ++r) {
            for (std::size_t c = 0; c < ga->cols(); ++c) (*ga)(r, c) += g[r];
          }
        }
        break;
      case OpKind::ConcatCols: {
        std::size_t offset = 0;
        for (int pid : p) {
          const std::size_t width = nodes_[pid].value.cols();
          if (Tensor* gp = grad_slot(pid)) {
            for (std::size_t r = 0; r < g.rows(); ++r) {
              for (std::size_t c = 0; c < width; ++c) (*gp)(r, c) += g(r, offset + c);
            }
          }
          offset += width;
        }
        break;
      }
      case OpKind::SelectCols:
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < n.indices.size(); ++c) (*ga)(r, n.indices[c]) += g(r, c);
          }
        }
        break;
      case OpKind::Reshape:
        if (Tensor* ga = grad_slot(p[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        break;
      case OpKind::RowLocal: {
        const std::size_t out_cols = n.value.cols();
        for (std::size_t k = 0; k < p.size(); ++k) {
          Tensor* gp = grad_slot(p[k]);
          if (!gp) continue;
          const Tensor& jac = n.saved[k];
          const std::size_t in_cols = gp->cols();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < out_cols; ++c) {
              const double go = g(r, c);
              if (go == 0.0) continue;
              for (std::size_t j = 0; j < in_cols; ++j) (*gp)(r, j) += go * jac(r, c * in_cols + j);
            }
          }
        }
        break;
      }
      case OpKind::Leaf:
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) shape_mismatch("matmul", av, bv);
  Tensor out = Tensor::zeros(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return record(OpKind::MatMul, {a, b}, std::move(out));
}

Var add_row_vector(Var a, Var row) {
  check_same_tape(a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) shape_mismatch("add_row_vector", av, rv);
  Tensor out = av;
  as_matrix(out).rowwise() += as_matrix(rv).row(0);
  return record(OpKind::AddRowVector, {a, row}, std::move(out));
}

Var affine(Var x, Var weight, Var bias) { return add_row_vector(matmul(x, weight), bias); }

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  accumulate(out, b.value());
  return record(OpKind::Add, {a, b}, std::move(out));
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  as_matrix(out) -= as_matrix(b.value());
  return record(OpKind::Sub, {a, b}, std::move(out));
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  as_matrix(out) = as_matrix(out).cwiseProduct(as_matrix(b.value()));
  return record(OpKind::Mul, {a, b}, std::move(out));
}

Var scale(Var a, double factor) {
  return record(OpKind::Scale, {a}, map_values(a.value(), [factor](double x) { return factor * x; }),
                {}, factor);
}

Var add_scalar(Var a, double value) {
  return record(OpKind::AddScalar, {a}, map_values(a.value(), [value](double x) { return x + value; }));
}

Var tanh(Var a) {
  return record(OpKind::Tanh, {a}, map_values(a.value(), [](double x) { return std::tanh(x); }));
}

Var relu(Var a) {
  return record(OpKind::Relu, {a}, map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }));
}

Var sigmoid(Var a) { return record(OpKind::Sigmoid, {a}, map_values(a.value(), stable_sigmoid)); }

Var log_sigmoid(Var a) {
  return record(OpKind::LogSigmoid, {a}, map_values(a.value(), stable_log_sigmoid));
}

Var exp(Var a) {
  return record(OpKind::Exp, {a}, map_values(a.value(), [](double x) { return std::exp(x); }));
}

Var square(Var a) {
  return record(OpKind::Square, {a}, map_values(a.value(), [](double x) { return x * x; }));
}

Var logsumexp_rows(Var a) {
  const Tensor& av = a.value();
  Tensor out = Tensor::zeros(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) out[r] = logsumexp(av.row(r));
  return record(OpKind::LogSumExpRows, {a}, std::move(out));
}

Var sum(Var a) {
  const auto d = a.value().data();
  return record(OpKind::SumAll, {a}, Tensor::scalar(std::accumulate(d.begin(), d.end(), 0.0)));
}

Var mean(Var a) {
  const auto d = a.value().data();
  if (d.empty()) throw ShapeError("mean of an empty tensor");
  return record(OpKind::MeanAll, {a},
                Tensor::scalar(std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size())));
}

Var sum_cols(Var a) {
  const Tensor& av = a.value();
  Tensor out = Tensor::zeros(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const auto row = av.row(r);
    out[r] = std::accumulate(row.begin(), row.end(), 0.0);
  }
  return record(OpKind::SumCols, {a}, std::move(out));
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
  const std::size_t rows = parts.front().value().rows();
  std::size_t width = 0;
  for (const Var& p : parts) {
    check_same_tape(parts.front(), p);
    if (p.value().rows() != rows) shape_mismatch("concat_cols", parts.front().value(), p.value());
    width += p.value().cols();
  }
  Tensor out = Tensor::zeros(rows, width);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offset + c) = pv(r, c);
    }
    offset += pv.cols();
  }
  return record(OpKind::ConcatCols, parts, std::move(out));
}

Var select_cols(Var a, std::vector<std::size_t> columns) {
  const Tensor& av = a.value();
  for (std::size_t c : columns) {
    if (c >= av.cols()) {
      throw ShapeError("select_cols: column " + std::to_string(c) + " out of range for " +
                       av.shape_string());
    }
  }
  Tensor out = Tensor::zeros(av.rows(), columns.size());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) out(r, c) = av(r, columns[c]);
  }
  return record(OpKind::SelectCols, {a}, std::move(out), {}, 0.0, std::move(columns));
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& av = a.value();
  if (rows * cols != av.size()) {
    throw ShapeError("reshape: cannot view " + av.shape_string() + " as " + shape_string({rows, cols}));
  }
  return record(OpKind::Reshape, {a}, Tensor({rows, cols}, std::vector<double>(av.data().begin(), av.data().end())));
}

Var row_local(const std::vector<Var>& parents, Tensor value, std::vector<Tensor> jacobians,
              const char* name) {
  if (parents.empty() || parents.size() != jacobians.size()) {
    throw std::invalid_argument(std::string(name) + ": one Jacobian per parent required");
  }
  for (std::size_t k = 0; k < parents.size(); ++k) {
    const Tensor& pv = parents[k].value();
    if (pv.rows() != value.rows() || jacobians[k].rows() != value.rows() ||
        jacobians[k].cols() != value.cols() * pv.cols()) {
      shape_mismatch(name, pv, jacobians[k]);
    }
  }
  if (!value.all_finite()) throw NumericError(std::string("non-finite output in op '") + name + "'");
  return record(OpKind::RowLocal, parents, std::move(value), std::move(jacobians));
}

// ---------------------------------------------------------------------------
// Scalar helpers

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double stable_log_sigmoid(double z) {
  if (z < 0.0) return z - std::log1p(std::exp(z));
  return -std::log1p(std::exp(-z));
}

double logsumexp(std::span<const double> v) {
  if (v.empty()) throw ShapeError("logsumexp of an empty vector");
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace bsbi
