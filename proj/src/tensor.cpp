#include "cotlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace cotlab {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

MapC as_mat(const Tensor& t) {
  return MapC(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
Map as_mat(Tensor& t) {
  return Map(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

Var finish(Graph& g, Tensor out, std::vector<std::size_t> inputs, Graph::BackwardFn fn,
           const char* op) {
  if (!out.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite output");
  }
  return g.record(std::move(out), std::move(inputs), std::move(fn));
}

Graph& graph_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty Var");
  return *a.graph();
}

Graph& graph_of(Var a, Var b) {
  if (a.graph() != b.graph()) throw std::invalid_argument("operands live on different graphs");
  return graph_of(a);
}

double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double u = k * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_deriv(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {
  if (shape_.size() > 2) throw ShapeError("tensors are limited to rank 2");
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 2) throw ShapeError("tensors are limited to rank 2");
  if (product(shape_) != data_.size()) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str());
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

std::size_t EdgeMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), true));
}

// ---- Graph ------------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

const Tensor& Graph::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf: non-finite value");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(const Tensor& external, bool requires_grad) {
  Node n;
  n.external = &external;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) n.backward = std::move(fn);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad(std::size_t id) {
  Tensor& g = grads_[id];
  if (g.size() == 0 && value(id).size() != 0) g = Tensor(value(id).shape(), 0.0);
  return g;
}

Gradients Graph::backward(Var loss) {
  if (loss.graph() != this) throw std::invalid_argument("backward: loss is not on this graph");
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + value(loss.id()).shape_str());
  }
  grads_.assign(nodes_.size(), Tensor());
  grad(loss.id())[0] = 1.0;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad || !n.backward || grads_[k].size() == 0) continue;
    current_out_grad_ = &grads_[k];
    n.backward(*this);
  }
  current_out_grad_ = nullptr;
  for (std::size_t k = 0; k < grads_.size(); ++k) {
    if (!nodes_[k].requires_grad) grads_[k] = Tensor();
    if (!grads_[k].all_finite()) throw NumericError("backward: non-finite gradient");
  }
  return Gradients(this, std::move(grads_));
}

Tensor Gradients::operator[](Var v) const {
  if (const Tensor* g = find(v)) return *g;
  return Tensor(v.value().shape(), 0.0);
}

const Tensor* Gradients::find(Var v) const {
  if (v.graph() != graph_ || v.id() >= grads_.size()) return nullptr;
  const Tensor& g = grads_[v.id()];
  return g.size() == 0 && v.value().size() != 0 ? nullptr : &g;
}

// ---- element-wise -----------------------------------------------------------

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return finish(g, std::move(out), {ia, ib}, [ia, ib](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    for (std::size_t id : {ia, ib}) {
      if (!gr.requires_grad(id)) continue;
      Tensor& d = gr.grad(id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  }, "add");
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return finish(g, std::move(out), {ia, ib}, [ia, ib](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    if (gr.requires_grad(ia)) {
      Tensor& d = gr.grad(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& d = gr.grad(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dy[i];
    }
  }, "sub");
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return finish(g, std::move(out), {ia, ib}, [ia, ib](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& va = gr.value(ia);
    const Tensor& vb = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Tensor& d = gr.grad(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * vb[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& d = gr.grad(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * va[i];
    }
  }, "mul");
}

Var add_bias(Var a, Var bias) {
  Graph& g = graph_of(a, bias);
  const Tensor& va = a.value();
  const Tensor& vb = bias.value();
  if (vb.size() != va.cols()) {
    throw ShapeError("add_bias: bias " + vb.shape_str() + " does not match " + va.shape_str());
  }
  Tensor out = va;
  const std::size_t R = va.rows(), C = va.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] += vb[c];
  const std::size_t ia = a.id(), ib = bias.id();
  return finish(g, std::move(out), {ia, ib}, [ia, ib, R, C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    if (gr.requires_grad(ia)) {
      Tensor& d = gr.grad(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& d = gr.grad(ib);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) d[c] += dy[r * C + c];
    }
  }, "add_bias");
}

Var scale(Var a, double s) {
  Graph& g = graph_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const std::size_t ia = a.id();
  return finish(g, std::move(out), {ia}, [ia, s](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    Tensor& d = gr.grad(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * dy[i];
  }, "scale");
}

Var mul_const(Var a, const Tensor& c) {
  Graph& g = graph_of(a);
  require_same(a.value(), c, "mul_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const std::size_t ia = a.id();
  return finish(g, std::move(out), {ia}, [ia, c](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    Tensor& d = gr.grad(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * c[i];
  }, "mul_const");
}

Var mask_rows(Var a, const RowMask& keep) {
  Graph& g = graph_of(a);
  const Tensor& va = a.value();
  if (keep.size() != va.rows()) throw ShapeError("mask_rows: mask length mismatch");
  Tensor out = va;
  const std::size_t C = va.cols();
  for (std::size_t r = 0; r < va.rows(); ++r)
    if (!keep[r]) std::fill_n(out.ptr() + r * C, C, 0.0);
  const std::size_t ia = a.id();
  return finish(g, std::move(out), {ia}, [ia, keep, C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    Tensor& d = gr.grad(ia);
    for (std::size_t r = 0; r < keep.size(); ++r)
      if (keep[r])
        for (std::size_t c = 0; c < C; ++c) d[r * C + c] += dy[r * C + c];
  }, "mask_rows");
}

// ---- matrix products --------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  if (va.cols() != vb.rows()) {
    throw ShapeError("matmul: " + va.shape_str() + " x " + vb.shape_str());
  }
  Tensor out = Tensor::matrix(va.rows(), vb.cols());
  as_mat(out).noalias() = as_mat(va) * as_mat(vb);
  const std::size_t ia = a.id(), ib = b.id();
  return finish(g, std::move(out), {ia, ib}, [ia, ib](Graph& gr) {
    const auto dy = as_mat(gr.out_grad());
    if (gr.requires_grad(ia)) as_mat(gr.grad(ia)).noalias() += dy * as_mat(gr.value(ib)).transpose();
    if (gr.requires_grad(ib)) as_mat(gr.grad(ib)).noalias() += as_mat(gr.value(ia)).transpose() * dy;
  }, "matmul");
}

Var matmul_nt(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  if (va.cols() != vb.cols()) {
    throw ShapeError("matmul_nt: " + va.shape_str() + " x " + vb.shape_str() + "^T");
  }
  Tensor out = Tensor::matrix(va.rows(), vb.rows());
  as_mat(out).noalias() = as_mat(va) * as_mat(vb).transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return finish(g, std::move(out), {ia, ib}, [ia, ib](Graph& gr) {
    const auto dy = as_mat(gr.out_grad());
    if (gr.requires_grad(ia)) as_mat(gr.grad(ia)).noalias() += dy * as_mat(gr.value(ib));
    if (gr.requires_grad(ib)) as_mat(gr.grad(ib)).noalias() += dy.transpose() * as_mat(gr.value(ia));
  }, "matmul_nt");
}

// ---- gradient-shaping primitives ----------------------------------------------

Var stop_gradient(Var x) {
  Graph& g = graph_of(x);
  return finish(g, x.value(), {}, nullptr, "stop_gradient");
}

Var sign(Var x) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  return finish(g, std::move(out), {}, nullptr, "sign");
}

Var exp(Var x) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = std::exp(v);
  const std::size_t ix = x.id();
  const std::size_t iy = g.size();
  return finish(g, std::move(out), {ix}, [ix, iy](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& y = gr.value(iy);
    Tensor& d = gr.grad(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * y[i];
  }, "exp");
}

Var clamp(Var x, double lo, double hi) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  const std::size_t ix = x.id();
  return finish(g, std::move(out), {ix}, [ix, lo, hi](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& vx = gr.value(ix);
    Tensor& d = gr.grad(ix);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (vx[i] >= lo && vx[i] <= hi) d[i] += dy[i];
  }, "clamp");
}

Var minimum(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same(a.value(), b.value(), "minimum");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], b.value()[i]);
  const std::size_t ia = a.id(), ib = b.id();
  return finish(g, std::move(out), {ia, ib}, [ia, ib](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& va = gr.value(ia);
    const Tensor& vb = gr.value(ib);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const bool take_a = va[i] <= vb[i];
      const std::size_t id = take_a ? ia : ib;
      if (gr.requires_grad(id)) gr.grad(id)[i] += dy[i];
    }
  }, "minimum");
}

Var gelu(Var x) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = gelu_value(v);
  const std::size_t ix = x.id();
  return finish(g, std::move(out), {ix}, [ix](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& vx = gr.value(ix);
    Tensor& d = gr.grad(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * gelu_deriv(vx[i]);
  }, "gelu");
}

// ---- distributions ----------------------------------------------------------

namespace {

void softmax_backward(const Tensor& p, const Tensor& dy, Tensor& dx) {
  const std::size_t R = p.rows(), C = p.cols();
  for (std::size_t r = 0; r < R; ++r) {
    const double* pr = p.ptr() + r * C;
    const double* gr = dy.ptr() + r * C;
    double dot = 0.0;
    for (std::size_t c = 0; c < C; ++c) dot += pr[c] * gr[c];
    double* dr = dx.ptr() + r * C;
    for (std::size_t c = 0; c < C; ++c) dr[c] += pr[c] * (gr[c] - dot);
  }
}

}  // namespace

Var masked_softmax(Var logits, const EdgeMask& allowed) {
  Graph& g = graph_of(logits);
  const Tensor& z = logits.value();
  const std::size_t R = z.rows(), C = z.cols();
  if (allowed.rows != R || allowed.cols != C) {
    throw ShapeError("masked_softmax: mask does not match logits " + z.shape_str());
  }
  Tensor out = Tensor::matrix(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c)
      if (allowed(r, c)) mx = std::max(mx, z.at(r, c));
    if (!std::isfinite(mx)) {
      throw ShapeError("masked_softmax: row " + std::to_string(r) + " has no allowed key");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      if (!allowed(r, c)) continue;
      const double e = std::exp(z.at(r, c) - mx);
      out.at(r, c) = e;
      total += e;
    }
    for (std::size_t c = 0; c < C; ++c) out.at(r, c) /= total;
  }
  const std::size_t iz = logits.id();
  const std::size_t iy = g.size();
  return finish(g, std::move(out), {iz}, [iz, iy](Graph& gr) {
    softmax_backward(gr.value(iy), gr.out_grad(), gr.grad(iz));
  }, "masked_softmax");
}

Var softmax(Var logits) {
  const Tensor& z = logits.value();
  return masked_softmax(logits, EdgeMask(z.rows(), z.cols(), true));
}

std::vector<double> log_softmax_row(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double kl_from_logits(std::span<const double> p_logits, std::span<const double> q_logits) {
  if (p_logits.size() != q_logits.size()) throw ShapeError("kl: row length mismatch");
  const auto lp = log_softmax_row(p_logits);
  const auto lq = log_softmax_row(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double p = std::exp(lp[i]);
    if (p < kProbFloor) continue;
    kl += p * (lp[i] - lq[i]);
  }
  return std::max(kl, 0.0);
}

double entropy_from_logits(std::span<const double> logits) {
  const auto lp = log_softmax_row(logits);
  double h = 0.0;
  for (double l : lp) {
    const double p = std::exp(l);
    if (p < kProbFloor) continue;
    h -= p * l;
  }
  return std::max(h, 0.0);
}

Var log_softmax(Var logits) {
  Graph& g = graph_of(logits);
  const Tensor& z = logits.value();
  const std::size_t R = z.rows(), C = z.cols();
  Tensor out = Tensor::matrix(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    const auto row = log_softmax_row(std::span<const double>(z.ptr() + r * C, C));
    std::copy(row.begin(), row.end(), out.ptr() + r * C);
  }
  const std::size_t iz = logits.id();
  const std::size_t iy = g.size();
  return finish(g, std::move(out), {iz}, [iz, iy, R, C](Graph& gr) {
    const Tensor& y = gr.value(iy);
    const Tensor& dy = gr.out_grad();
    Tensor& dx = gr.grad(iz);
    for (std::size_t r = 0; r < R; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < C; ++c) total += dy[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        dx[r * C + c] += dy[r * C + c] - std::exp(y[r * C + c]) * total;
    }
  }, "log_softmax");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = graph_of(x, gain);
  const Tensor& vx = x.value();
  const std::size_t R = vx.rows(), C = vx.cols();
  if (gain.value().size() != C || bias.value().size() != C) {
    throw ShapeError("layer_norm: gain/bias do not match " + vx.shape_str());
  }
  Tensor out = Tensor::matrix(R, C);
  std::vector<double> xhat(R * C), inv_std(R);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < R; ++r) {
    const double* xr = vx.ptr() + r * C;
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(C);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (xr[c] - mu) * inv_std[r];
      out[r * C + c] = gv[c] * xhat[r * C + c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return finish(g, std::move(out), {ix, ig, ib},
                [ix, ig, ib, R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& gv = gr.value(ig);
    if (gr.requires_grad(ig)) {
      Tensor& dg = gr.grad(ig);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) dg[c] += dy[r * C + c] * xhat[r * C + c];
    }
    if (gr.requires_grad(ib)) {
      Tensor& db = gr.grad(ib);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) db[c] += dy[r * C + c];
    }
    if (gr.requires_grad(ix)) {
      Tensor& dx = gr.grad(ix);
      for (std::size_t r = 0; r < R; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double dxh = dy[r * C + c] * gv[c];
          m1 += dxh;
          m2 += dxh * xhat[r * C + c];
        }
        m1 /= static_cast<double>(C);
        m2 /= static_cast<double>(C);
        for (std::size_t c = 0; c < C; ++c) {
          const double dxh = dy[r * C + c] * gv[c];
          dx[r * C + c] += inv_std[r] * (dxh - m1 - xhat[r * C + c] * m2);
        }
      }
    }
  }, "layer_norm");
}

// ---- indexing ---------------------------------------------------------------

Var pick(Var x, std::span<const std::size_t> index) {
  Graph& g = graph_of(x);
  const Tensor& vx = x.value();
  const std::size_t R = vx.rows(), C = vx.cols();
  if (index.size() != R) throw ShapeError("pick: one index per row required");
  Tensor out({R});
  for (std::size_t r = 0; r < R; ++r) {
    if (index[r] >= C) throw ShapeError("pick: index out of range");
    out[r] = vx.at(r, index[r]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::size_t ix = x.id();
  return finish(g, std::move(out), {ix}, [ix, idx = std::move(idx), C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    Tensor& d = gr.grad(ix);
    for (std::size_t r = 0; r < idx.size(); ++r) d[r * C + idx[r]] += dy[r];
  }, "pick");
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  Graph& g = graph_of(table);
  const Tensor& vt = table.value();
  const std::size_t C = vt.cols();
  Tensor out = Tensor::matrix(ids.size(), C);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= vt.rows()) throw ShapeError("gather_rows: id out of range");
    std::copy_n(vt.ptr() + ids[r] * C, C, out.ptr() + r * C);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return finish(g, std::move(out), {it}, [it, idx = std::move(idx), C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    Tensor& d = gr.grad(it);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < C; ++c) d[idx[r] * C + c] += dy[r * C + c];
  }, "gather_rows");
}

Var slice_rows(Var x, std::size_t begin, std::size_t n) {
  Graph& g = graph_of(x);
  const Tensor& vx = x.value();
  const std::size_t C = vx.cols();
  if (begin + n > vx.rows()) throw ShapeError("slice_rows: range exceeds " + vx.shape_str());
  Tensor out = Tensor::matrix(n, C);
  std::copy_n(vx.ptr() + begin * C, n * C, out.ptr());
  const std::size_t ix = x.id();
  return finish(g, std::move(out), {ix}, [ix, begin, n, C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    Tensor& d = gr.grad(ix);
    for (std::size_t i = 0; i < n * C; ++i) d[begin * C + i] += dy[i];
  }, "slice_rows");
}

Var slice_cols(Var x, std::size_t begin, std::size_t n) {
  Graph& g = graph_of(x);
  const Tensor& vx = x.value();
  const std::size_t R = vx.rows(), C = vx.cols();
  if (begin + n > C) throw ShapeError("slice_cols: range exceeds " + vx.shape_str());
  Tensor out = Tensor::matrix(R, n);
  for (std::size_t r = 0; r < R; ++r) std::copy_n(vx.ptr() + r * C + begin, n, out.ptr() + r * n);
  const std::size_t ix = x.id();
  return finish(g, std::move(out), {ix}, [ix, begin, n, R, C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    Tensor& d = gr.grad(ix);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < n; ++c) d[r * C + begin + c] += dy[r * n + c];
  }, "slice_cols");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Graph& g = graph_of(parts[0]);
  const std::size_t R = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t C = 0;
  for (Var p : parts) {
    if (p.graph() != &g) throw std::invalid_argument("concat_cols: mixed graphs");
    if (p.value().rows() != R) throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    C += p.value().cols();
  }
  Tensor out = Tensor::matrix(R, C);
  std::size_t off = 0;
  for (Var p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < R; ++r) std::copy_n(p.value().ptr() + r * w, w, out.ptr() + r * C + off);
    off += w;
  }
  return finish(g, std::move(out), ids, [ids, widths, R, C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t w = widths[k];
      if (gr.requires_grad(ids[k])) {
        Tensor& d = gr.grad(ids[k]);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < w; ++c) d[r * w + c] += dy[r * C + off + c];
      }
      off += w;
    }
  }, "concat_cols");
}

// ---- reductions -------------------------------------------------------------

Var sum(Var x) {
  Graph& g = graph_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return finish(g, Tensor::scalar(s), {ix}, [ix](Graph& gr) {
    const double dy = gr.out_grad()[0];
    for (double& v : gr.grad(ix).data()) v += dy;
  }, "sum");
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var weighted_sum(Var x, std::span<const double> w) {
  Graph& g = graph_of(x);
  if (w.size() != x.value().size()) throw ShapeError("weighted_sum: weight length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.value()[i];
  std::vector<double> wv(w.begin(), w.end());
  const std::size_t ix = x.id();
  return finish(g, Tensor::scalar(s), {ix}, [ix, wv = std::move(wv)](Graph& gr) {
    const double dy = gr.out_grad()[0];
    Tensor& d = gr.grad(ix);
    for (std::size_t i = 0; i < wv.size(); ++i) d[i] += dy * wv[i];
  }, "weighted_sum");
}

Var row_kl(Var p_logits, Var q_logits) {
  Graph& g = graph_of(p_logits, q_logits);
  const Tensor& p = p_logits.value();
  const Tensor& q = q_logits.value();
  require_same(p, q, "row_kl");
  const std::size_t R = p.rows(), C = p.cols();
  Tensor out({R});
  for (std::size_t r = 0; r < R; ++r) {
    out[r] = kl_from_logits(std::span<const double>(p.ptr() + r * C, C),
                            std::span<const double>(q.ptr() + r * C, C));
  }
  const std::size_t ip = p_logits.id(), iq = q_logits.id();
  const std::size_t iy = g.size();
  return finish(g, std::move(out), {ip, iq}, [ip, iq, iy, R, C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& pz = gr.value(ip);
    const Tensor& qz = gr.value(iq);
    const Tensor& kl = gr.value(iy);
    for (std::size_t r = 0; r < R; ++r) {
      const auto lp = log_softmax_row(std::span<const double>(pz.ptr() + r * C, C));
      const auto lq = log_softmax_row(std::span<const double>(qz.ptr() + r * C, C));
      if (gr.requires_grad(ip)) {
        Tensor& d = gr.grad(ip);
        for (std::size_t c = 0; c < C; ++c) {
          const double pc = std::exp(lp[c]);
          if (pc < kProbFloor) continue;
          d[r * C + c] += dy[r] * pc * (lp[c] - lq[c] - kl[r]);
        }
      }
      if (gr.requires_grad(iq)) {
        Tensor& d = gr.grad(iq);
        for (std::size_t c = 0; c < C; ++c) d[r * C + c] += dy[r] * (std::exp(lq[c]) - std::exp(lp[c]));
      }
    }
  }, "row_kl");
}

Var row_entropy(Var logits) {
  Graph& g = graph_of(logits);
  const Tensor& z = logits.value();
  const std::size_t R = z.rows(), C = z.cols();
  Tensor out({R});
  for (std::size_t r = 0; r < R; ++r) {
    out[r] = entropy_from_logits(std::span<const double>(z.ptr() + r * C, C));
  }
  const std::size_t iz = logits.id();
  const std::size_t iy = g.size();
  return finish(g, std::move(out), {iz}, [iz, iy, R, C](Graph& gr) {
    const Tensor& dy = gr.out_grad();
    const Tensor& zz = gr.value(iz);
    const Tensor& h = gr.value(iy);
    Tensor& d = gr.grad(iz);
    for (std::size_t r = 0; r < R; ++r) {
      const auto lp = log_softmax_row(std::span<const double>(zz.ptr() + r * C, C));
      for (std::size_t c = 0; c < C; ++c) {
        const double pc = std::exp(lp[c]);
        if (pc < kProbFloor) continue;
        d[r * C + c] -= dy[r] * pc * (lp[c] + h[r]);
      }
    }
  }, "row_entropy");
}

}  // namespace cotlab
