// autodiff.hpp: minimal define-by-run reverse-mode differentiation over
// row-major 64-bit tensors of rank 1 or 2, plus SGD with momentum.
//
// A Graph owns every intermediate value produced while it is alive. Leaves
// bound with Graph::parameter() write their gradient back into the bound
// Tensor on backward(); gradients accumulate until sgd_step() clears them.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace softtrack::ad {

struct Tensor
{
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty when absent

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> v, bool needs_grad = false)
    : shape(std::move(s)), values(std::move(v)), requires_grad(needs_grad)
  {
    if (numel(shape) != values.size()) {
      throw std::invalid_argument("Tensor: shape does not match value count");
    }
  }

  static Tensor zeros(std::vector<std::size_t> s, bool needs_grad = false)
  {
    const auto n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0), needs_grad);
  }

  static Tensor row(std::vector<double> v, bool needs_grad = false)
  {
    const auto n = v.size();
    return Tensor({n}, std::move(v), needs_grad);
  }

  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v,
                       bool needs_grad = false)
  {
    return Tensor({r, c}, std::move(v), needs_grad);
  }

  static std::size_t numel(const std::vector<std::size_t>& s)
  {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return values.size(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  bool has_grad() const { return !grad.empty(); }

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols() + c]; }

  /// Equal shape and values; gradient buffers are ignored.
  bool operator==(const Tensor& o) const { return shape == o.shape && values == o.values; }
};

inline std::string shape_string(const std::vector<std::size_t>& s)
{
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    out << (i ? "," : "") << s[i];
  }
  out << ']';
  return out.str();
}

enum class OpKind
{
  Leaf,
  Parameter,
  MatMul,
  MatMulNT,
  Add,
  AddRow,
  Mul,
  Affine,
  Relu,
  Tanh,
  LayerNorm,
  SoftmaxRows,
  GatherCols,
  SelectRows,
  ConcatRows,
  Sum,
  CosineRows,
  CrossEntropySum,
};

inline const char* op_name(OpKind op)
{
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Mul: return "mul";
    case OpKind::Affine: return "affine";
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::SoftmaxRows: return "softmax";
    case OpKind::GatherCols: return "gather_cols";
    case OpKind::SelectRows: return "select_rows";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::Sum: return "sum";
    case OpKind::CosineRows: return "cosine_rows";
    case OpKind::CrossEntropySum: return "cross_entropy_sum";
  }
  return "unknown";
}

class ShapeError : public std::invalid_argument
{
public:
  ShapeError(OpKind op, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b)
    : std::invalid_argument(std::string(op_name(op)) + ": incompatible shapes " +
                            shape_string(a) + " and " + shape_string(b))
  {
  }
};

struct Var
{
  std::size_t id = 0;
};

class Graph
{
public:
  struct Node
  {
    OpKind op = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<double> grad;
    Tensor* bound = nullptr;
    bool needs_grad = false;
    std::function<void(Graph&, const Node&)> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t)
  {
    t.requires_grad = false;
    return push(OpKind::Leaf, {}, std::move(t), false, {});
  }

  // Binds a parameter; backward() accumulates into p.grad.
  Var parameter(Tensor& p)
  {
    Tensor copy(p.shape, p.values, p.requires_grad);
    const bool track = p.requires_grad && grad_enabled_;
    Var v = push(OpKind::Parameter, {}, std::move(copy), track, {});
    nodes_[v.id].bound = &p;
    if (track) {
      bound_.push_back(v.id);
    }
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const std::vector<double>& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  // With gradients disabled no backward closures are kept.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  Var push(OpKind op, std::vector<std::size_t> inputs, Tensor value, bool needs_grad,
           std::function<void(Graph&, const Node&)> backward)
  {
    for (auto id : inputs) {
      if (id >= nodes_.size()) {
        throw std::logic_error("Graph: input node does not precede its consumer");
      }
    }
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) {
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<double>& grad_buffer(std::size_t id)
  {
    auto& n = nodes_[id];
    if (n.grad.empty()) {
      n.grad.assign(n.value.size(), 0.0);
    }
    return n.grad;
  }

  void backward(Var loss)
  {
    if (nodes_.at(loss.id).value.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_string(nodes_[loss.id].value.shape));
    }
    for (auto& n : nodes_) {
      n.grad.clear();
    }
    for (auto id : bound_) {
      auto* p = nodes_[id].bound;
      if (p->grad.size() != p->values.size()) {
        p->grad.assign(p->values.size(), 0.0);
      }
    }
    if (!nodes_[loss.id].needs_grad) {
      return;
    }
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (n.grad.empty() || !n.needs_grad) {
        continue;
      }
      if (n.op == OpKind::Parameter) {
        auto* p = n.bound;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          p->grad[i] += n.grad[i];
        }
      } else if (n.backward) {
        n.backward(*this, n);
      }
    }
  }

private:
  std::vector<Node> nodes_;
  std::vector<std::size_t> bound_;
  bool grad_enabled_ = true;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap view(const Tensor& t) { return ConstMap(t.values.data(), t.rows(), t.cols()); }
inline ConstMap view(const std::vector<double>& v, std::size_t r, std::size_t c)
{
  return ConstMap(v.data(), r, c);
}
inline MutMap mut(std::vector<double>& v, std::size_t r, std::size_t c)
{
  return MutMap(v.data(), r, c);
}

inline bool any_grad(const Graph& g, std::initializer_list<Var> vs)
{
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return g.needs_grad(v); });
}

inline void accumulate(Graph& g, std::size_t id, const std::vector<double>& delta)
{
  if (!g.node(id).needs_grad) {
    return;
  }
  auto& buf = g.grad_buffer(id);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    buf[i] += delta[i];
  }
}

inline std::vector<std::size_t> shape2(std::size_t r, std::size_t c) { return {r, c}; }

}  // namespace detail

/// a[m×k] · b[k×n]
inline Var matmul(Graph& g, Var a, Var b)
{
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.cols() != B.rows()) {
    throw ShapeError(OpKind::MatMul, A.shape, B.shape);
  }
  const auto m = A.rows(), n = B.cols();
  std::vector<double> out(m * n);
  detail::mut(out, m, n).noalias() = detail::view(A) * detail::view(B);
  return g.push(OpKind::MatMul, {a.id, b.id}, Tensor(detail::shape2(m, n), std::move(out)),
                detail::any_grad(g, {a, b}), [](Graph& gr, const Graph::Node& nd) {
                  const auto& A = gr.value(Var{nd.inputs[0]});
                  const auto& B = gr.value(Var{nd.inputs[1]});
                  auto dC = detail::view(nd.grad, A.rows(), B.cols());
                  if (gr.node(nd.inputs[0]).needs_grad) {
                    std::vector<double> dA(A.size());
                    detail::mut(dA, A.rows(), A.cols()).noalias() = dC * detail::view(B).transpose();
                    detail::accumulate(gr, nd.inputs[0], dA);
                  }
                  if (gr.node(nd.inputs[1]).needs_grad) {
                    std::vector<double> dB(B.size());
                    detail::mut(dB, B.rows(), B.cols()).noalias() = detail::view(A).transpose() * dC;
                    detail::accumulate(gr, nd.inputs[1], dB);
                  }
                });
}

/// a[m×k] · b[n×k]ᵀ
inline Var matmul_nt(Graph& g, Var a, Var b)
{
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.cols() != B.cols()) {
    throw ShapeError(OpKind::MatMulNT, A.shape, B.shape);
  }
  const auto m = A.rows(), n = B.rows();
  std::vector<double> out(m * n);
  detail::mut(out, m, n).noalias() = detail::view(A) * detail::view(B).transpose();
  return g.push(OpKind::MatMulNT, {a.id, b.id}, Tensor(detail::shape2(m, n), std::move(out)),
                detail::any_grad(g, {a, b}), [](Graph& gr, const Graph::Node& nd) {
                  const auto& A = gr.value(Var{nd.inputs[0]});
                  const auto& B = gr.value(Var{nd.inputs[1]});
                  auto dC = detail::view(nd.grad, A.rows(), B.rows());
                  if (gr.node(nd.inputs[0]).needs_grad) {
                    std::vector<double> dA(A.size());
                    detail::mut(dA, A.rows(), A.cols()).noalias() = dC * detail::view(B);
                    detail::accumulate(gr, nd.inputs[0], dA);
                  }
                  if (gr.node(nd.inputs[1]).needs_grad) {
                    std::vector<double> dB(B.size());
                    detail::mut(dB, B.rows(), B.cols()).noalias() = dC.transpose() * detail::view(A);
                    detail::accumulate(gr, nd.inputs[1], dB);
                  }
                });
}

inline Var add(Graph& g, Var a, Var b)
{
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.shape != B.shape) {
    throw ShapeError(OpKind::Add, A.shape, B.shape);
  }
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = A.values[i] + B.values[i];
  }
  return g.push(OpKind::Add, {a.id, b.id}, Tensor(A.shape, std::move(out)),
                detail::any_grad(g, {a, b}), [](Graph& gr, const Graph::Node& nd) {
                  detail::accumulate(gr, nd.inputs[0], nd.grad);
                  detail::accumulate(gr, nd.inputs[1], nd.grad);
                });
}

/// Adds a row vector b[n] to every row of a[m×n].
inline Var add_row(Graph& g, Var a, Var b)
{
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (B.size() != A.cols()) {
    throw ShapeError(OpKind::AddRow, A.shape, B.shape);
  }
  const auto m = A.rows(), n = A.cols();
  std::vector<double> out(A.values);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] += B.values[c];
    }
  }
  return g.push(OpKind::AddRow, {a.id, b.id}, Tensor(A.shape, std::move(out)),
                detail::any_grad(g, {a, b}), [m, n](Graph& gr, const Graph::Node& nd) {
                  detail::accumulate(gr, nd.inputs[0], nd.grad);
                  std::vector<double> db(n, 0.0);
                  for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < n; ++c) {
                      db[c] += nd.grad[r * n + c];
                    }
                  }
                  detail::accumulate(gr, nd.inputs[1], db);
                });
}

/// Elementwise product.
inline Var mul(Graph& g, Var a, Var b)
{
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.shape != B.shape) {
    throw ShapeError(OpKind::Mul, A.shape, B.shape);
  }
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = A.values[i] * B.values[i];
  }
  return g.push(OpKind::Mul, {a.id, b.id}, Tensor(A.shape, std::move(out)),
                detail::any_grad(g, {a, b}), [](Graph& gr, const Graph::Node& nd) {
                  const auto& A = gr.value(Var{nd.inputs[0]}).values;
                  const auto& B = gr.value(Var{nd.inputs[1]}).values;
                  std::vector<double> da(A.size()), db(A.size());
                  for (std::size_t i = 0; i < A.size(); ++i) {
                    da[i] = nd.grad[i] * B[i];
                    db[i] = nd.grad[i] * A[i];
                  }
                  detail::accumulate(gr, nd.inputs[0], da);
                  detail::accumulate(gr, nd.inputs[1], db);
                });
}

/// scale·x + shift, elementwise.
inline Var affine(Graph& g, Var x, double scale, double shift = 0.0)
{
  const auto& X = g.value(x);
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = scale * X.values[i] + shift;
  }
  return g.push(OpKind::Affine, {x.id}, Tensor(X.shape, std::move(out)), g.needs_grad(x),
                [scale](Graph& gr, const Graph::Node& nd) {
                  std::vector<double> dx(nd.grad.size());
                  for (std::size_t i = 0; i < dx.size(); ++i) {
                    dx[i] = scale * nd.grad[i];
                  }
                  detail::accumulate(gr, nd.inputs[0], dx);
                });
}

inline Var relu(Graph& g, Var x)
{
  const auto& X = g.value(x);
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = X.values[i] <= 0.0 ? 0.0 : X.values[i];  // NaN passes through
  }
  return g.push(OpKind::Relu, {x.id}, Tensor(X.shape, std::move(out)), g.needs_grad(x),
                [](Graph& gr, const Graph::Node& nd) {
                  const auto& X = gr.value(Var{nd.inputs[0]}).values;
                  std::vector<double> dx(X.size());
                  for (std::size_t i = 0; i < dx.size(); ++i) {
                    dx[i] = X[i] > 0.0 ? nd.grad[i] : 0.0;
                  }
                  detail::accumulate(gr, nd.inputs[0], dx);
                });
}

inline Var tanh(Graph& g, Var x)
{
  const auto& X = g.value(x);
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::tanh(X.values[i]);
  }
  return g.push(OpKind::Tanh, {x.id}, Tensor(X.shape, std::move(out)), g.needs_grad(x),
                [](Graph& gr, const Graph::Node& nd) {
                  const auto& Y = nd.value.values;
                  std::vector<double> dx(Y.size());
                  for (std::size_t i = 0; i < dx.size(); ++i) {
                    dx[i] = nd.grad[i] * (1.0 - Y[i] * Y[i]);
                  }
                  detail::accumulate(gr, nd.inputs[0], dx);
                });
}

/// Row-wise (x - mean) / sqrt(var + eps) * gain + bias, biased variance.
inline Var layer_norm(Graph& g, Var x, Var gain, Var bias, double eps = 1e-5)
{
  const auto& X = g.value(x);
  const auto& G = g.value(gain);
  const auto& B = g.value(bias);
  if (G.size() != X.cols()) {
    throw ShapeError(OpKind::LayerNorm, X.shape, G.shape);
  }
  if (B.size() != X.cols()) {
    throw ShapeError(OpKind::LayerNorm, X.shape, B.shape);
  }
  if (!(eps > 0.0)) {
    throw std::invalid_argument("layer_norm: epsilon must be positive");
  }
  const auto m = X.rows(), n = X.cols();
  std::vector<double> out(X.size());
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = X.values.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      mean += row[c];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      var += (row[c] - mean) * (row[c] - mean);
    }
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mean) * inv_std[r];
      out[r * n + c] = xhat[r * n + c] * G.values[c] + B.values[c];
    }
  }
  return g.push(
    OpKind::LayerNorm, {x.id, gain.id, bias.id}, Tensor(X.shape, std::move(out)),
    detail::any_grad(g, {x, gain, bias}),
    [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, const Graph::Node& nd) {
      const auto& G = gr.value(Var{nd.inputs[1]}).values;
      std::vector<double> dx(m * n), dg(n, 0.0), db(n, 0.0);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < m; ++r) {
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          const auto k = r * n + c;
          const double dxh = nd.grad[k] * G[c];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhat[k];
          dg[c] += nd.grad[k] * xhat[k];
          db[c] += nd.grad[k];
        }
        for (std::size_t c = 0; c < n; ++c) {
          const auto k = r * n + c;
          const double dxh = nd.grad[k] * G[c];
          dx[k] = inv_std[r] * (dxh - inv_n * sum_dxh - xhat[k] * inv_n * sum_dxh_xh);
        }
      }
      detail::accumulate(gr, nd.inputs[0], dx);
      detail::accumulate(gr, nd.inputs[1], dg);
      detail::accumulate(gr, nd.inputs[2], db);
    });
}

/// Numerically stable row softmax.
inline Var softmax_rows(Graph& g, Var x)
{
  const auto& X = g.value(x);
  const auto m = X.rows(), n = X.cols();
  std::vector<double> out(X.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = X.values.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] = std::exp(row[c] - mx);
      z += out[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] /= z;
    }
  }
  return g.push(OpKind::SoftmaxRows, {x.id}, Tensor(X.shape, std::move(out)), g.needs_grad(x),
                [m, n](Graph& gr, const Graph::Node& nd) {
                  const auto& Y = nd.value.values;
                  std::vector<double> dx(m * n);
                  for (std::size_t r = 0; r < m; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                      dot += nd.grad[r * n + c] * Y[r * n + c];
                    }
                    for (std::size_t c = 0; c < n; ++c) {
                      dx[r * n + c] = Y[r * n + c] * (nd.grad[r * n + c] - dot);
                    }
                  }
                  detail::accumulate(gr, nd.inputs[0], dx);
                });
}

/// out(r, c) = x(r, index[r·cols + c]); index is row-major with x.rows() rows.
inline Var gather_cols(Graph& g, Var x, std::vector<std::size_t> index, std::size_t cols)
{
  const auto& X = g.value(x);
  const auto m = X.rows(), src = X.cols();
  if (index.size() != m * cols) {
    throw ShapeError(OpKind::GatherCols, X.shape, {m, cols});
  }
  std::vector<double> out(m * cols);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const auto k = index[r * cols + c];
      if (k >= src) {
        throw std::out_of_range("gather_cols: column index out of range");
      }
      out[r * cols + c] = X.values[r * src + k];
    }
  }
  return g.push(OpKind::GatherCols, {x.id}, Tensor(detail::shape2(m, cols), std::move(out)),
                g.needs_grad(x),
                [m, src, cols, index = std::move(index)](Graph& gr, const Graph::Node& nd) {
                  std::vector<double> dx(m * src, 0.0);
                  for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      dx[r * src + index[r * cols + c]] += nd.grad[r * cols + c];
                    }
                  }
                  detail::accumulate(gr, nd.inputs[0], dx);
                });
}

/// Picks rows of x (repeats allowed). Result is always rank 2.
inline Var select_rows(Graph& g, Var x, std::vector<std::size_t> rows)
{
  const auto& X = g.value(x);
  const auto n = X.cols(), m = X.rows();
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) {
      throw std::out_of_range("select_rows: row index out of range");
    }
    std::copy_n(X.values.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  const auto k = rows.size();
  return g.push(OpKind::SelectRows, {x.id}, Tensor(detail::shape2(k, n), std::move(out)),
                g.needs_grad(x), [n, rows = std::move(rows)](Graph& gr, const Graph::Node& nd) {
                  if (!gr.node(nd.inputs[0]).needs_grad) {
                    return;
                  }
                  auto& dx = gr.grad_buffer(nd.inputs[0]);
                  for (std::size_t i = 0; i < rows.size(); ++i) {
                    for (std::size_t c = 0; c < n; ++c) {
                      dx[rows[i] * n + c] += nd.grad[i * n + c];
                    }
                  }
                });
}

/// Stacks inputs vertically; rank-1 inputs count as one row.
inline Var concat_rows(Graph& g, std::span<const Var> parts)
{
  if (parts.empty()) {
    throw std::invalid_argument("concat_rows: no inputs");
  }
  const auto n = g.value(parts[0]).cols();
  std::vector<std::size_t> ids;
  std::vector<double> out;
  bool track = false;
  for (auto p : parts) {
    const auto& P = g.value(p);
    if (P.cols() != n) {
      throw ShapeError(OpKind::ConcatRows, g.value(parts[0]).shape, P.shape);
    }
    out.insert(out.end(), P.values.begin(), P.values.end());
    ids.push_back(p.id);
    track = track || g.needs_grad(p);
  }
  const auto m = out.size() / n;
  return g.push(OpKind::ConcatRows, ids, Tensor(detail::shape2(m, n), std::move(out)), track,
                [](Graph& gr, const Graph::Node& nd) {
                  std::size_t offset = 0;
                  for (auto id : nd.inputs) {
                    const auto len = gr.node(id).value.size();
                    std::vector<double> d(nd.grad.begin() + static_cast<std::ptrdiff_t>(offset),
                                          nd.grad.begin() + static_cast<std::ptrdiff_t>(offset + len));
                    detail::accumulate(gr, id, d);
                    offset += len;
                  }
                });
}

inline Var sum(Graph& g, Var x)
{
  const auto& X = g.value(x);
  double s = 0.0;
  for (double v : X.values) {
    s += v;
  }
  return g.push(OpKind::Sum, {x.id}, Tensor({1}, {s}), g.needs_grad(x),
                [](Graph& gr, const Graph::Node& nd) {
                  const auto len = gr.node(nd.inputs[0]).value.size();
                  detail::accumulate(gr, nd.inputs[0], std::vector<double>(len, nd.grad[0]));
                });
}

/// Row-wise cosine similarity between a[m×n] and b[m×n]; rejects zero rows.
inline Var cosine_rows(Graph& g, Var a, Var b)
{
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.shape != B.shape) {
    throw ShapeError(OpKind::CosineRows, A.shape, B.shape);
  }
  const auto m = A.rows(), n = A.cols();
  std::vector<double> out(m), na(m), nb(m);
  for (std::size_t r = 0; r < m; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double x = A.values[r * n + c], y = B.values[r * n + c];
      dot += x * y;
      aa += x * x;
      bb += y * y;
    }
    if (aa == 0.0 || bb == 0.0) {
      throw std::invalid_argument("cosine_rows: zero-norm embedding in row " + std::to_string(r));
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    out[r] = dot / (na[r] * nb[r]);
  }
  return g.push(OpKind::CosineRows, {a.id, b.id}, Tensor({m}, std::move(out)),
                detail::any_grad(g, {a, b}),
                [m, n, na = std::move(na), nb = std::move(nb)](Graph& gr, const Graph::Node& nd) {
                  const auto& A = gr.value(Var{nd.inputs[0]}).values;
                  const auto& B = gr.value(Var{nd.inputs[1]}).values;
                  std::vector<double> da(m * n), db(m * n);
                  for (std::size_t r = 0; r < m; ++r) {
                    const double cs = nd.value.values[r];
                    for (std::size_t c = 0; c < n; ++c) {
                      const auto k = r * n + c;
                      da[k] = nd.grad[r] * (B[k] / (na[r] * nb[r]) - cs * A[k] / (na[r] * na[r]));
                      db[k] = nd.grad[r] * (A[k] / (na[r] * nb[r]) - cs * B[k] / (nb[r] * nb[r]));
                    }
                  }
                  detail::accumulate(gr, nd.inputs[0], da);
                  detail::accumulate(gr, nd.inputs[1], db);
                });
}

/// Σ_r −log softmax(logits_r)[target_r] as a scalar.
inline Var cross_entropy_sum(Graph& g, Var logits, std::vector<std::size_t> targets)
{
  const auto& X = g.value(logits);
  const auto m = X.rows(), n = X.cols();
  if (targets.size() != m) {
    throw ShapeError(OpKind::CrossEntropySum, X.shape, {targets.size()});
  }
  std::vector<double> prob(m * n);
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= n) {
      throw std::out_of_range("cross_entropy_sum: target " + std::to_string(targets[r]) +
                              " out of range for " + std::to_string(n) + " classes");
    }
    const double* row = X.values.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      prob[r * n + c] = std::exp(row[c] - mx);
      z += prob[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) {
      prob[r * n + c] /= z;
    }
    loss += -(row[targets[r]] - mx - std::log(z));
  }
  return g.push(OpKind::CrossEntropySum, {logits.id}, Tensor({1}, {loss}), g.needs_grad(logits),
                [m, n, prob = std::move(prob), targets = std::move(targets)](Graph& gr,
                                                                             const Graph::Node& nd) {
                  std::vector<double> dx(prob);
                  for (std::size_t r = 0; r < m; ++r) {
                    dx[r * n + targets[r]] -= 1.0;
                  }
                  for (auto& v : dx) {
                    v *= nd.grad[0];
                  }
                  detail::accumulate(gr, nd.inputs[0], dx);
                });
}

struct NamedParam
{
  std::string name;
  Tensor* tensor = nullptr;
};

struct SgdState
{
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::vector<std::vector<double>> velocity;
};

/// velocity ← momentum·velocity + grad; param ← param − lr·velocity; grads cleared.
inline void sgd_step(std::span<const NamedParam> params, SgdState& state)
{
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) {
      throw std::invalid_argument("sgd_step: parameter '" + p.name + "' has no gradient");
    }
  }
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) {
      state.velocity.emplace_back(p.tensor->size(), 0.0);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = *params[k].tensor;
    auto& vel = state.velocity[k];
    if (vel.size() != t.size()) {
      throw std::invalid_argument("sgd_step: velocity shape mismatch for '" + params[k].name + "'");
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      vel[i] = state.momentum * vel[i] + t.grad[i];
      t.values[i] -= state.learning_rate * vel[i];
    }
    t.grad.clear();
  }
}

}  // namespace softtrack::ad
