#pragma once

// Dense row-major float64 tensors and a define-by-run reverse-mode tape.
//
// Every op works on 2-D values; a tensor of shape {n} is viewed as n x 1 and
// a scalar is 1 x 1. Ops append a node to the tape that owns their operands.
// Tape policy: backward() fills gradients but leaves the recorded graph in
// place, so values and gradients stay readable until clear() is called. A
// training step is "clear, record forward, backward, read grads".

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bsbi {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() : shape_{0, 0} {}
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor full(std::size_t rows, std::size_t cols, double value);
  static Tensor scalar(double value);
  /// rows x cols from row-major values.
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

enum class OpKind {
  Leaf,
  MatMul,
  AddRowVector,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Tanh,
  Relu,
  Sigmoid,
  LogSigmoid,
  Exp,
  Square,
  LogSumExpRows,
  SumAll,
  MeanAll,
  SumCols,
  ConcatCols,
  SelectCols,
  Reshape,
  RowLocal,
};

const char* op_name(OpKind op);

struct TapeNode {
  OpKind op = OpKind::Leaf;
  std::vector<int> parents;
  Tensor value;
  /// Activations (or local Jacobians for RowLocal) kept for backward.
  std::vector<Tensor> saved;
  std::vector<std::size_t> indices;
  double scalar = 0.0;
  bool requires_grad = false;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  Tape& tape() const;
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that gradients are accumulated for (a parameter).
  Var leaf(Tensor value);
  /// Input treated as data: no gradient flows into it.
  Var constant(Tensor value);

  /// Reverse sweep from a scalar root. Throws ShapeError on a non-scalar root.
  void backward(Var root);

  /// Gradient of the last backward root w.r.t. `v`; zeros if unreached.
  Tensor grad(Var v) const;

  void clear();
  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  Var push(TapeNode node);

 private:
  std::vector<TapeNode> nodes_;
  std::vector<Tensor> grads_;
};

// Forward ops. All check shapes (ShapeError naming both shapes) and that the
// result is finite (NumericError naming the op).
Var matmul(Var a, Var b);
Var add_row_vector(Var a, Var row);
/// x W + b with W: in x out, b: 1 x out.
Var affine(Var x, Var weight, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double value);
Var tanh(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var exp(Var a);
Var square(Var a);
/// Row-wise logsumexp: n x m -> n x 1.
Var logsumexp_rows(Var a);
Var sum(Var a);
Var mean(Var a);
/// Row sums: n x m -> n x 1.
Var sum_cols(Var a);
Var concat_cols(const std::vector<Var>& parts);
Var select_cols(Var a, std::vector<std::size_t> columns);
/// Same row-major data viewed as rows x cols.
Var reshape(Var a, std::size_t rows, std::size_t cols);

/// Generic op whose output row r depends only on row r of each parent.
/// `jacobians[p]` has shape n x (out_cols * parent_cols) holding
/// d out(r, c) / d parent(r, j) at column c * parent_cols + j.
Var row_local(const std::vector<Var>& parents, Tensor value, std::vector<Tensor> jacobians,
              const char* name);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return scale(a, -1.0); }

// Scalar helpers shared by the plain (tape-free) evaluation paths.
double stable_sigmoid(double z);
double stable_log_sigmoid(double z);
double logsumexp(std::span<const double> v);

}  // namespace bsbi
