#pragma once

// Minimal reverse-mode differentiation over column vectors and matrices.
//
// A Tape records every operation of one forward pass. Parameters are bound by
// reference together with a gradient sink, so the backward sweep writes
// parameter gradients straight into caller-owned storage and nothing is copied
// per use. A Tape belongs to a single forward pass and is not thread-safe.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mxlstm/tensor.hpp"

namespace mxlstm {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = std::numeric_limits<std::size_t>::max();

  bool valid() const noexcept { return tape != nullptr; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    Node n;
    n.owned = std::move(value);
    return push_node(std::move(n));
  }

  /// Leaf that reads `value` by reference and never receives a gradient.
  Var reference(const Matrix& value) {
    Node n;
    n.ref = &value;
    return push_node(std::move(n));
  }

  /// Leaf bound to `weights`; its gradient accumulates into `grad_sink` (same shape).
  Var parameter(const Matrix& weights, Matrix& grad_sink) {
    if (!weights.same_shape(grad_sink)) {
      throw ShapeError("Tape::parameter: gradient sink " + grad_sink.shape_string() +
                       " does not match weights " + weights.shape_string());
    }
    Node n;
    n.ref = &weights;
    n.grad_ref = &grad_sink;
    n.requires_grad = true;
    return push_node(std::move(n));
  }

  /// Generic node; `backward` runs only if some input requires a gradient.
  Var push(Matrix value, bool requires_grad, Backward backward) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    return push_node(std::move(n));
  }

  const Matrix& value(Var v) const { return node(v).value(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient buffer of `v`, zero-initialised on first access.
  Matrix& grad(Var v) {
    Node& n = node(v);
    if (n.grad_ref != nullptr) return *n.grad_ref;
    if (n.own_grad.empty() && !n.value().empty()) n.own_grad = Matrix(n.value().rows(), n.value().cols());
    return n.own_grad;
  }

  /// Accumulates d(loss)/d(every parameter) into the bound sinks.
  void backward(Var loss) {
    if (loss.tape != this || loss.id >= nodes_.size()) {
      throw std::invalid_argument("Tape::backward: scalar was not recorded on this tape");
    }
    const Matrix& lv = node(loss).value();
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("Tape::backward: loss must be 1x1, got " + lv.shape_string());
    }
    if (!node(loss).requires_grad) return;
    grad(loss)[0] += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.own_grad.empty()) continue;
      n.backward(*this, n.own_grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix own_grad;
    Matrix* grad_ref = nullptr;
    bool requires_grad = false;
    Backward backward;

    const Matrix& value() const { return ref != nullptr ? *ref : owned; }
  };

  Var push_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.tape != this || v.id >= nodes_.size()) throw std::invalid_argument("Tape: foreign or invalid Var");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw std::invalid_argument("Tape: foreign or invalid Var");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

namespace ad {

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("ad: operation on an unbound Var");
  return *a.tape;
}

inline void require_column(const Matrix& m, const char* op) {
  if (m.cols() != 1) throw ShapeError(std::string(op) + ": expected a column vector, got " + m.shape_string());
}

/// W x + b for a column vector x.
inline Var affine(Var w, Var x, Var b) {
  Tape& t = tape_of(w);
  const Matrix& W = t.value(w);
  const Matrix& X = t.value(x);
  const Matrix& B = t.value(b);
  require_column(X, "affine");
  if (W.cols() != X.rows() || B.rows() != W.rows() || B.cols() != 1) {
    throw ShapeError("affine: W " + W.shape_string() + ", x " + X.shape_string() + ", b " + B.shape_string());
  }
  Matrix out = B;
  for (std::size_t i = 0; i < W.rows(); ++i) {
    double s = 0.0;
    const double* row = &W.values()[i * W.cols()];
    for (std::size_t k = 0; k < W.cols(); ++k) s += row[k] * X[k];
    out[i] += s;
  }
  const bool rg = t.requires_grad(w) || t.requires_grad(x) || t.requires_grad(b);
  return t.push(std::move(out), rg, [w, x, b](Tape& tp, const Matrix& g) {
    const Matrix& Wm = tp.value(w);
    const Matrix& Xm = tp.value(x);
    if (tp.requires_grad(w)) {
      Matrix& gw = tp.grad(w);
      for (std::size_t i = 0; i < Wm.rows(); ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        double* row = &gw.values()[i * Wm.cols()];
        for (std::size_t k = 0; k < Wm.cols(); ++k) row[k] += gi * Xm[k];
      }
    }
    if (tp.requires_grad(x)) {
      Matrix& gx = tp.grad(x);
      for (std::size_t i = 0; i < Wm.rows(); ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        const double* row = &Wm.values()[i * Wm.cols()];
        for (std::size_t k = 0; k < Wm.cols(); ++k) gx[k] += gi * row[k];
      }
    }
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

inline Var add(Var a, Var b) {
  Tape& t = tape_of(a);
  Matrix out = t.value(a) + t.value(b);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = tape_of(a);
  Matrix out = t.value(a) - t.value(b);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) -= g;
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = tape_of(a);
  Matrix out = hadamard(t.value(a), t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.grad(a) += hadamard(g, tp.value(b));
    if (tp.requires_grad(b)) tp.grad(b) += hadamard(g, tp.value(a));
  });
}

namespace detail {

template <typename F, typename DF>
Var unary(Var a, F f, DF df_from_out) {
  Tape& t = tape_of(a);
  Matrix out = t.value(a);
  for (auto& v : out.values()) v = f(v);
  return t.push(std::move(out), t.requires_grad(a), [a, df_from_out, self = t.size()](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    const Matrix& y = tp.value(Var{&tp, self});
    Matrix& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df_from_out(x[i], y[i]);
  });
}

}  // namespace detail

inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Stacks column vectors.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape& t = tape_of(parts.front());
  std::size_t n = 0;
  bool rg = false;
  for (Var p : parts) {
    require_column(t.value(p), "concat");
    n += t.value(p).rows();
    rg = rg || t.requires_grad(p);
  }
  Matrix out(n, 1);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& v = t.value(p);
    for (std::size_t i = 0; i < v.rows(); ++i) out[off + i] = v[i];
    off += v.rows();
  }
  return t.push(std::move(out), rg, [parts](Tape& tp, const Matrix& g) {
    std::size_t pos = 0;
    for (Var p : parts) {
      const std::size_t len = tp.value(p).rows();
      if (tp.requires_grad(p)) {
        Matrix& gp = tp.grad(p);
        for (std::size_t i = 0; i < len; ++i) gp[i] += g[pos + i];
      }
      pos += len;
    }
  });
}

/// Rows [offset, offset + length) of a column vector.
inline Var slice(Var a, std::size_t offset, std::size_t length) {
  Tape& t = tape_of(a);
  const Matrix& v = t.value(a);
  require_column(v, "slice");
  if (offset + length > v.rows()) throw ShapeError("slice: range exceeds vector length " + std::to_string(v.rows()));
  Matrix out(length, 1);
  for (std::size_t i = 0; i < length; ++i) out[i] = v[offset + i];
  return t.push(std::move(out), t.requires_grad(a), [a, offset](Tape& tp, const Matrix& g) {
    Matrix& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.rows(); ++i) ga[offset + i] += g[i];
  });
}

/// Sum of all entries of all inputs, as a 1x1 node.
inline Var sum(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("sum: no inputs");
  Tape& t = tape_of(terms.front());
  double s = 0.0;
  bool rg = false;
  for (Var v : terms) {
    for (double x : t.value(v).values()) s += x;
    rg = rg || t.requires_grad(v);
  }
  return t.push(Matrix(1, 1, s), rg, [terms](Tape& tp, const Matrix& g) {
    for (Var v : terms) {
      if (!tp.requires_grad(v)) continue;
      Matrix& gv = tp.grad(v);
      for (auto& x : gv.values()) x += g[0];
    }
  });
}

}  // namespace ad
}  // namespace mxlstm
