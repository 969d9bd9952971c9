#pragma once

// Dense row-major tensors and a recording tape for reverse-mode autodiff.
//
// Every primitive checks its output for NaN/Inf and throws NumericError.
// Tensors are rank 0, 1 or 2; matrix primitives treat a rank-1 tensor of
// length n as an n x 1 column.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotlab {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Row mask over the first dimension of a matrix.
using RowMask = std::vector<bool>;

/// rows x cols boolean matrix, row-major.
struct EdgeMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<bool> bits;

  EdgeMask() = default;
  EdgeMask(std::size_t r, std::size_t c, bool fill = false)
      : rows(r), cols(c), bits(r * c, fill) {}
  bool operator()(std::size_t i, std::size_t j) const { return bits[i * cols + j]; }
  void set(std::size_t i, std::size_t j, bool v) { bits[i * cols + j] = v; }
  std::size_t count() const;
};

class Graph;

/// Handle to a node recorded on a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  const Tensor& value() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Result of Graph::backward. Nodes the loss does not reach read as zeros.
class Gradients {
 public:
  Gradients() = default;
  Gradients(const Graph* g, std::vector<Tensor> grads) : graph_(g), grads_(std::move(grads)) {}

  Tensor operator[](Var v) const;
  /// Borrowed gradient; nullptr when the node received none.
  const Tensor* find(Var v) const;

 private:
  const Graph* graph_ = nullptr;
  std::vector<Tensor> grads_;
};

/// Single-writer tape. Nodes are appended in execution order, so the
/// recorded order is already topological.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  /// Non-owning leaf; `external` must outlive the graph.
  Var param(const Tensor& external, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Gradients backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Used by primitive implementations.
  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  /// Gradient buffer of a node during backward, zero-initialised on first use.
  Tensor& grad(std::size_t id);
  const Tensor& out_grad() const { return *current_out_grad_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  // deque keeps value references stable while the tape grows.
  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  const Tensor* current_out_grad_ = nullptr;
};

// ---- primitives -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// a + row broadcast of bias (bias has `a.cols()` entries).
Var add_bias(Var a, Var bias);
Var scale(Var a, double s);
/// Element-wise product with a constant tensor of the same shape.
Var mul_const(Var a, const Tensor& c);
/// Zeroes rows where `keep` is false.
Var mask_rows(Var a, const RowMask& keep);

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);

Var stop_gradient(Var x);
/// Element-wise sign in {-1, 0, +1}; zero gradient.
Var sign(Var x);
Var exp(Var x);
/// Element-wise clamp; zero gradient outside [lo, hi].
Var clamp(Var x, double lo, double hi);
/// Element-wise minimum; gradient flows to the selected argument (a on ties).
Var minimum(Var a, Var b);
Var gelu(Var x);

/// Row-wise softmax over allowed entries. Disallowed entries are exactly 0.
/// Throws ShapeError if a row has no allowed entry.
Var masked_softmax(Var logits, const EdgeMask& allowed);
Var softmax(Var logits);
Var log_softmax(Var logits);
/// Row-wise layer normalisation with gain and bias vectors.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// out[i] = x[i, index[i]]
Var pick(Var x, std::span<const std::size_t> index);
/// out[i, :] = table[ids[i], :]
Var gather_rows(Var table, std::span<const std::size_t> ids);
/// Rows [begin, begin + n) of x.
Var slice_rows(Var x, std::size_t begin, std::size_t n);
Var slice_cols(Var x, std::size_t begin, std::size_t n);
Var concat_cols(std::span<const Var> parts);

Var sum(Var x);
Var mean(Var x);
/// sum_i w[i] * x[i] for constant weights.
Var weighted_sum(Var x, std::span<const double> w);

/// Per-row KL(softmax(p) || softmax(q)) in nats; shape {rows}.
Var row_kl(Var p_logits, Var q_logits);
/// Per-row entropy of softmax(logits) in nats; shape {rows}.
Var row_entropy(Var logits);

// ---- plain (untaped) helpers ----------------------------------------------

/// Log-space helpers shared by the tape primitives and the metrics.
std::vector<double> log_softmax_row(std::span<const double> logits);
double kl_from_logits(std::span<const double> p_logits, std::span<const double> q_logits);
double entropy_from_logits(std::span<const double> logits);

/// Probabilities below this contribute no log term to KL and entropy.
inline constexpr double kProbFloor = 1e-12;

}  // namespace cotlab
