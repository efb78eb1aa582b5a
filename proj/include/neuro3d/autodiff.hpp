#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D matrices.
//
// Every value is a row-major matrix. Sequences and batches are flattened into
// rows; ops that need to know about grouping (attention, pooling) take the
// group size explicitly. Graphs are built eagerly and freed when the last
// Var referencing them goes away.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace neuro3d::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives d(loss)/d(value) and accumulates into the parents.
  std::function<void(const Matrix<T>&)> backward;

  void accumulate(const Matrix<T>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <typename T>
class Var {
 public:
  using Scalar = T;

  Var() = default;
  explicit Var(Matrix<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var scalar(T v) { return Var(Matrix<T>::Constant(1, 1, v)); }

  bool defined() const { return node_ != nullptr; }
  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  const Matrix<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  T item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar");
    return node_->value(0, 0);
  }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() { node_->grad.resize(0, 0); }

  /// Reverse sweep from a scalar root.
  void backward() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("backward() requires a scalar root");
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->accumulate(Matrix<T>::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && n->grad.size() != 0) n->backward(n->grad);
    }
    // Interior gradients are not needed after the sweep.
    for (Node<T>* n : order) {
      if (n->backward) n->grad.resize(0, 0);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Matrix<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T>
Var<T> parameter(Matrix<T> value) {
  return Var<T>(std::move(value), true);
}

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
  if (!grad_mode()) return false;
  for (const Var<T>* v : inputs) {
    if (v->requires_grad()) return true;
  }
  return false;
}

// Builds the output node. The backward closure is only kept when a gradient
// can flow.
template <typename T, typename Backward>
Var<T> make_result(Matrix<T> value, std::initializer_list<const Var<T>*> inputs,
                   Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (any_requires_grad<T>(inputs)) {
    node->requires_grad = true;
    for (const Var<T>* v : inputs) node->parents.push_back(v->node());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<T>(std::move(node));
}

template <typename T>
void push_grad(const std::shared_ptr<Node<T>>& n, const Matrix<T>& g) {
  if (n->requires_grad) n->accumulate(g);
}

// Sums g down to (rows, cols), undoing a size-1 broadcast.
template <typename T>
Matrix<T> reduce_to(const Matrix<T>& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Matrix<T> r = g;
  if (rows == 1 && r.rows() != 1) r = r.colwise().sum().eval();
  if (cols == 1 && r.cols() != 1) r = r.rowwise().sum().eval();
  return r;
}

template <typename T>
Matrix<T> expand(const Matrix<T>& a, Index rows, Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if (a.rows() == 1 && a.cols() == 1) return Matrix<T>::Constant(rows, cols, a(0, 0));
  if (a.rows() == 1 && a.cols() == cols) return a.replicate(rows, 1);
  if (a.cols() == 1 && a.rows() == rows) return a.replicate(1, cols);
  throw ShapeError("incompatible broadcast");
}

inline Index broadcast_dim(Index a, Index b) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ShapeError("incompatible broadcast: " + std::to_string(a) + " vs " + std::to_string(b));
}

template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, Fwd fwd, DA da, DB db) {
  const Index r = broadcast_dim(a.rows(), b.rows());
  const Index c = broadcast_dim(a.cols(), b.cols());
  Matrix<T> ea = expand(a.value(), r, c);
  Matrix<T> eb = expand(b.value(), r, c);
  Matrix<T> out = fwd(ea, eb);
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(std::move(out), {&a, &b},
                        [an, bn, ea = std::move(ea), eb = std::move(eb), da, db](const Matrix<T>& g) {
                          if (an->requires_grad)
                            an->accumulate(reduce_to<T>(da(g, ea, eb), an->value.rows(), an->value.cols()));
                          if (bn->requires_grad)
                            bn->accumulate(reduce_to<T>(db(g, ea, eb), bn->value.rows(), bn->value.cols()));
                        });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& a, Fwd fwd, Deriv deriv) {
  Matrix<T> out = a.value().unaryExpr(fwd);
  auto an = a.node();
  return make_result<T>(std::move(out), {&a}, [an, deriv](const Matrix<T>& g) {
    an->accumulate(g.cwiseProduct(an->value.unaryExpr(deriv)));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (size-1 broadcasting on either side)

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](const Matrix<T>& x, const Matrix<T>& y) -> Matrix<T> { return x + y; },
      [](const Matrix<T>& g, const Matrix<T>&, const Matrix<T>&) -> Matrix<T> { return g; },
      [](const Matrix<T>& g, const Matrix<T>&, const Matrix<T>&) -> Matrix<T> { return g; });
}

template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](const Matrix<T>& x, const Matrix<T>& y) -> Matrix<T> { return x - y; },
      [](const Matrix<T>& g, const Matrix<T>&, const Matrix<T>&) -> Matrix<T> { return g; },
      [](const Matrix<T>& g, const Matrix<T>&, const Matrix<T>&) -> Matrix<T> { return -g; });
}

template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](const Matrix<T>& x, const Matrix<T>& y) -> Matrix<T> { return x.cwiseProduct(y); },
      [](const Matrix<T>& g, const Matrix<T>&, const Matrix<T>& y) -> Matrix<T> { return g.cwiseProduct(y); },
      [](const Matrix<T>& g, const Matrix<T>& x, const Matrix<T>&) -> Matrix<T> { return g.cwiseProduct(x); });
}

template <typename T>
Var<T> operator-(const Var<T>& a) {
  auto an = a.node();
  return detail::make_result<T>(-a.value(), {&a}, [an](const Matrix<T>& g) { an->accumulate(-g); });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  auto an = a.node();
  return detail::make_result<T>(a.value() * s, {&a}, [an, s](const Matrix<T>& g) { an->accumulate(g * s); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  auto an = a.node();
  return detail::make_result<T>((a.value().array() + s).matrix(), {&a},
                                [an](const Matrix<T>& g) { an->accumulate(g); });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::unary<T>(a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return detail::unary<T>(a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return detail::unary<T>(a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary<T>(a, [](T x) { return x > T(0) ? x : T(0); },
                          [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  // tanh approximation
  constexpr T c = T(0.7978845608028654);
  constexpr T k = T(0.044715);
  return detail::unary<T>(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x) {
        const T t = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix<T> out;
  out.noalias() = a.value() * b.value();
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(std::move(out), {&a, &b}, [an, bn](const Matrix<T>& g) {
    if (an->requires_grad) {
      Matrix<T> ga;
      ga.noalias() = g * bn->value.transpose();
      an->accumulate(ga);
    }
    if (bn->requires_grad) {
      Matrix<T> gb;
      gb.noalias() = an->value.transpose() * g;
      bn->accumulate(gb);
    }
  });
}

/// x·W + b with W stored (in × out) and b (1 × out). `bias` may be undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (x.cols() != weight.rows()) {
    throw ShapeError("linear: input width " + std::to_string(x.cols()) + " != weight rows " +
                     std::to_string(weight.rows()));
  }
  Matrix<T> out;
  out.noalias() = x.value() * weight.value();
  const bool has_bias = bias.defined();
  if (has_bias) out.rowwise() += bias.value().row(0);
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = has_bias ? bias.node() : nullptr;
  auto backward = [xn, wn, bn](const Matrix<T>& g) {
    if (xn->requires_grad) {
      Matrix<T> gx;
      gx.noalias() = g * wn->value.transpose();
      xn->accumulate(gx);
    }
    if (wn->requires_grad) {
      Matrix<T> gw;
      gw.noalias() = xn->value.transpose() * g;
      wn->accumulate(gw);
    }
    if (bn && bn->requires_grad) bn->accumulate(g.colwise().sum());
  };
  if (has_bias) return detail::make_result<T>(std::move(out), {&x, &weight, &bias}, std::move(backward));
  return detail::make_result<T>(std::move(out), {&x, &weight}, std::move(backward));
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  auto an = a.node();
  return detail::make_result<T>(a.value().transpose(), {&a},
                                [an](const Matrix<T>& g) { an->accumulate(g.transpose()); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  auto an = a.node();
  return detail::make_result<T>(Matrix<T>::Constant(1, 1, a.value().sum()), {&a}, [an](const Matrix<T>& g) {
    an->accumulate(Matrix<T>::Constant(an->value.rows(), an->value.cols(), g(0, 0)));
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

/// Mean of squared differences over all entries.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mse: shape mismatch");
  return mean(square(a - b));
}

// ---------------------------------------------------------------------------
// Row-group helpers. A matrix of G*R rows is viewed as G consecutive groups.

template <typename T>
Var<T> group_mean(const Var<T>& a, Index group_rows) {
  if (group_rows <= 0 || a.rows() % group_rows != 0) throw ShapeError("group_mean: rows not divisible");
  const Index groups = a.rows() / group_rows;
  Matrix<T> out(groups, a.cols());
  for (Index g = 0; g < groups; ++g) {
    out.row(g) = a.value().middleRows(g * group_rows, group_rows).colwise().mean();
  }
  auto an = a.node();
  return detail::make_result<T>(std::move(out), {&a}, [an, group_rows, groups](const Matrix<T>& g) {
    Matrix<T> ga(an->value.rows(), an->value.cols());
    const T inv = T(1) / static_cast<T>(group_rows);
    for (Index k = 0; k < groups; ++k) {
      ga.middleRows(k * group_rows, group_rows) = (g.row(k) * inv).replicate(group_rows, 1);
    }
    an->accumulate(ga);
  });
}

/// Column-wise max per group; ties resolve to the first row.
template <typename T>
Var<T> group_max(const Var<T>& a, Index group_rows) {
  if (group_rows <= 0 || a.rows() % group_rows != 0) throw ShapeError("group_max: rows not divisible");
  const Index groups = a.rows() / group_rows;
  const Index cols = a.cols();
  Matrix<T> out(groups, cols);
  std::vector<Index> arg(static_cast<std::size_t>(groups * cols));
  const Matrix<T>& v = a.value();
  for (Index g = 0; g < groups; ++g) {
    for (Index c = 0; c < cols; ++c) {
      Index best = g * group_rows;
      for (Index r = best + 1; r < (g + 1) * group_rows; ++r) {
        if (v(r, c) > v(best, c)) best = r;
      }
      out(g, c) = v(best, c);
      arg[static_cast<std::size_t>(g * cols + c)] = best;
    }
  }
  auto an = a.node();
  return detail::make_result<T>(std::move(out), {&a}, [an, arg = std::move(arg), groups, cols](const Matrix<T>& g) {
    Matrix<T> ga = Matrix<T>::Zero(an->value.rows(), an->value.cols());
    for (Index k = 0; k < groups; ++k) {
      for (Index c = 0; c < cols; ++c) ga(arg[static_cast<std::size_t>(k * cols + c)], c) += g(k, c);
    }
    an->accumulate(ga);
  });
}

/// Repeats each row of a (G × n) matrix group_rows times.
template <typename T>
Var<T> broadcast_groups(const Var<T>& a, Index group_rows) {
  const Index groups = a.rows();
  Matrix<T> out(groups * group_rows, a.cols());
  for (Index g = 0; g < groups; ++g) {
    out.middleRows(g * group_rows, group_rows) = a.value().row(g).replicate(group_rows, 1);
  }
  auto an = a.node();
  return detail::make_result<T>(std::move(out), {&a}, [an, group_rows, groups](const Matrix<T>& g) {
    Matrix<T> ga(groups, g.cols());
    for (Index k = 0; k < groups; ++k) ga.row(k) = g.middleRows(k * group_rows, group_rows).colwise().sum();
    an->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row mismatch");
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  auto an = a.node();
  auto bn = b.node();
  const Index ac = a.cols();
  const Index bc = b.cols();
  return detail::make_result<T>(std::move(out), {&a, &b}, [an, bn, ac, bc](const Matrix<T>& g) {
    if (an->requires_grad) an->accumulate(g.leftCols(ac));
    if (bn->requires_grad) bn->accumulate(g.rightCols(bc));
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  Index at = 0;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  bool needs_grad = false;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    nodes.push_back(p.node());
    needs_grad = needs_grad || p.requires_grad();
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  if (grad_mode() && needs_grad) {
    node->requires_grad = true;
    node->parents = nodes;
    node->backward = [nodes](const Matrix<T>& g) {
      Index offset = 0;
      for (const auto& n : nodes) {
        const Index r = n->value.rows();
        if (n->requires_grad) n->accumulate(g.middleRows(offset, r));
        offset += r;
      }
    };
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  auto an = a.node();
  return detail::make_result<T>(a.value().middleRows(start, count), {&a}, [an, start, count](const Matrix<T>& g) {
    Matrix<T> ga = Matrix<T>::Zero(an->value.rows(), an->value.cols());
    ga.middleRows(start, count) = g;
    an->accumulate(ga);
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  auto an = a.node();
  return detail::make_result<T>(a.value().middleCols(start, count), {&a}, [an, start, count](const Matrix<T>& g) {
    Matrix<T> ga = Matrix<T>::Zero(an->value.rows(), an->value.cols());
    ga.middleCols(start, count) = g;
    an->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// Fused layers

/// Row-wise layer normalization with learned gain and bias (each 1 × n).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  const Index rows = x.rows();
  const Index n = x.cols();
  if (gain.cols() != n || bias.cols() != n) throw ShapeError("layer_norm: parameter width mismatch");
  Matrix<T> xhat(rows, n);
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T mu = x.value().row(r).mean();
    const T var = (x.value().row(r).array() - mu).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (x.value().row(r).array() - mu) * is;
  }
  Matrix<T> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result<T>(
      std::move(out), {&x, &gain, &bias},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n](const Matrix<T>& g) {
        if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (bn->requires_grad) bn->accumulate(g.colwise().sum());
        if (xn->requires_grad) {
          Matrix<T> dxhat = g.array().rowwise() * gn->value.row(0).array();
          Matrix<T> gx(dxhat.rows(), n);
          for (Index r = 0; r < dxhat.rows(); ++r) {
            const T m1 = dxhat.row(r).mean();
            const T m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<T>(n);
            gx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std[static_cast<std::size_t>(r)];
          }
          xn->accumulate(gx);
        }
      });
}

/// Scaled dot-product attention, batched over row groups and split over heads.
///
/// q is (groups*q_rows × D); k and v are (groups*kv_rows × D). Head h uses
/// columns [h*D/heads, (h+1)*D/heads). Logits are scaled by 1/sqrt(D/heads).
/// If `weights_out` is non-null it receives one (q_rows × kv_rows) softmax
/// matrix per (group, head), group-major.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Index groups, Index heads,
                 std::vector<Matrix<T>>* weights_out = nullptr) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d) throw ShapeError("attention: width mismatch");
  if (groups <= 0 || q.rows() % groups != 0 || k.rows() % groups != 0 || v.rows() != k.rows()) {
    throw ShapeError("attention: rows not divisible by groups");
  }
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const Index sq = q.rows() / groups;
  const Index sk = k.rows() / groups;
  const Index dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> out(q.rows(), d);
  std::vector<Matrix<T>> probs;
  probs.reserve(static_cast<std::size_t>(groups * heads));
  for (Index g = 0; g < groups; ++g) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = q.value().block(g * sq, h * dh, sq, dh);
      auto kb = k.value().block(g * sk, h * dh, sk, dh);
      auto vb = v.value().block(g * sk, h * dh, sk, dh);
      Matrix<T> s;
      s.noalias() = qb * kb.transpose();
      s *= scale_factor;
      for (Index r = 0; r < sq; ++r) {
        const T m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(g * sq, h * dh, sq, dh).noalias() = s * vb;
      probs.push_back(std::move(s));
    }
  }
  if (weights_out) *weights_out = probs;
  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  return detail::make_result<T>(
      std::move(out), {&q, &k, &v},
      [qn, kn, vn, probs = std::move(probs), groups, heads, sq, sk, dh, scale_factor](const Matrix<T>& g) {
        Matrix<T> gq = Matrix<T>::Zero(qn->value.rows(), qn->value.cols());
        Matrix<T> gk = Matrix<T>::Zero(kn->value.rows(), kn->value.cols());
        Matrix<T> gv = Matrix<T>::Zero(vn->value.rows(), vn->value.cols());
        for (Index b = 0; b < groups; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix<T>& p = probs[static_cast<std::size_t>(b * heads + h)];
            auto go = g.block(b * sq, h * dh, sq, dh);
            auto qb = qn->value.block(b * sq, h * dh, sq, dh);
            auto kb = kn->value.block(b * sk, h * dh, sk, dh);
            auto vb = vn->value.block(b * sk, h * dh, sk, dh);
            gv.block(b * sk, h * dh, sk, dh).noalias() += p.transpose() * go;
            Matrix<T> dp;
            dp.noalias() = go * vb.transpose();
            Matrix<T> ds = p.cwiseProduct(dp);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
            ds -= p.cwiseProduct(row_dot.replicate(1, sk));
            ds *= scale_factor;
            gq.block(b * sq, h * dh, sq, dh).noalias() += ds * kb;
            gk.block(b * sk, h * dh, sk, dh).noalias() += ds.transpose() * qb;
          }
        }
        if (qn->requires_grad) qn->accumulate(gq);
        if (kn->requires_grad) kn->accumulate(gk);
        if (vn->requires_grad) vn->accumulate(gv);
      });
}

/// Scales each row to unit Euclidean norm. Rows with norm below eps are
/// divided by eps instead.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const Index rows = x.rows();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms(rows);
  for (Index r = 0; r < rows; ++r) norms(r) = std::max(x.value().row(r).norm(), eps);
  Matrix<T> out = x.value();
  for (Index r = 0; r < rows; ++r) out.row(r) /= norms(r);
  auto xn = x.node();
  Matrix<T> y = out;
  return detail::make_result<T>(std::move(out), {&x}, [xn, y = std::move(y), norms](const Matrix<T>& g) {
    Matrix<T> gx(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      const T dot = g.row(r).dot(y.row(r));
      gx.row(r) = (g.row(r) - y.row(r) * dot) / norms(r);
    }
    xn->accumulate(gx);
  });
}

/// Mean softmax cross-entropy of each row of `logits` against `labels`.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const Index rows = logits.rows();
  const Index k = logits.cols();
  if (static_cast<Index>(labels.size()) != rows) throw ShapeError("cross_entropy: label count mismatch");
  Matrix<T> probs(rows, k);
  T loss = 0;
  for (Index r = 0; r < rows; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= k) throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    const T m = logits.value().row(r).maxCoeff();
    probs.row(r) = (logits.value().row(r).array() - m).exp();
    const T z = probs.row(r).sum();
    probs.row(r) /= z;
    loss += (m + std::log(z)) - logits.value()(r, y);
  }
  loss /= static_cast<T>(rows);
  auto ln = logits.node();
  std::vector<int> ys(labels.begin(), labels.end());
  return detail::make_result<T>(Matrix<T>::Constant(1, 1, loss), {&logits},
                                [ln, probs = std::move(probs), ys = std::move(ys), rows](const Matrix<T>& g) {
                                  Matrix<T> gl = probs;
                                  for (Index r = 0; r < rows; ++r) gl(r, ys[static_cast<std::size_t>(r)]) -= T(1);
                                  gl *= g(0, 0) / static_cast<T>(rows);
                                  ln->accumulate(gl);
                                });
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

}  // namespace neuro3d::ad
