#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "refprior/matrix.hpp"
#include "refprior/softmax.hpp"

namespace refprior::num {

/// Reverse-mode recorder for the fixed set of primitives the detector needs.
///
/// Nodes are appended in creation order, which is a topological order of the
/// graph, so backward() is a single reverse sweep. A tape has one owner and
/// is discarded after each backward pass.
template <typename T>
class Tape {
 public:
  struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
  };
  /// Receives the output gradient and pushes contributions into inputs.
  using Backprop = std::function<void(Tape&, const Matrix<T>& out_grad)>;

  Var constant(Matrix<T> value) { return push(std::move(value), false, {}); }
  Var parameter(Matrix<T> value) { return push(std::move(value), true, {}); }

  const Matrix<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() root with respect to this node. Nodes that
  /// did not require a gradient report zeros.
  Matrix<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) return Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape once in reverse.
  void backward(Var root) {
    const Matrix<T>& rv = value(root);
    require(rv.rows() == 1 && rv.cols() == 1, "backward: root must be a 1x1 scalar");
    for (auto& n : nodes_) n.grad = Matrix<T>();
    nodes_[root.id].grad = Matrix<T>(1, 1, T{1});
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
      // The closure may touch nodes_ (accumulate), so keep a stable copy.
      const Matrix<T> g = n.grad;
      n.backprop(*this, g);
    }
  }

  /// Adds `g` into the gradient buffer of `v`. Used by primitive closures.
  void accumulate(Var v, const Matrix<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    require(g.rows() == n.value.rows() && g.cols() == n.value.cols(),
            "accumulate: gradient shape mismatch");
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.flat();
    auto src = g.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Records a derived node. `inputs` decide whether the node needs a gradient.
  Var record(Matrix<T> value, std::initializer_list<Var> inputs, Backprop fn, const char* op) {
    require_finite(value, op);
    bool needs = false;
    for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backprop{});
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var push(Matrix<T> value, bool requires_grad, Backprop fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

// ---- taped primitives ----------------------------------------------------

template <typename T>
using Var = typename Tape<T>::Var;

template <typename T>
Var<T> matmul(Tape<T>& t, Var<T> a, Var<T> b) {
  return t.record(
      matmul(t.value(a), t.value(b)), {a, b},
      [a, b](Tape<T>& tp, const Matrix<T>& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, matmul_nt(g, tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(tp.value(a), g));
      },
      "matmul");
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(Tape<T>& t, Var<T> a, Var<T> b) {
  return t.record(
      matmul_nt(t.value(a), t.value(b)), {a, b},
      [a, b](Tape<T>& tp, const Matrix<T>& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, matmul(g, tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(g, tp.value(a)));
      },
      "matmul_nt");
}

template <typename T>
Var<T> add(Tape<T>& t, Var<T> a, Var<T> b) {
  return t.record(
      t.value(a) + t.value(b), {a, b},
      [a, b](Tape<T>& tp, const Matrix<T>& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
      },
      "add");
}

template <typename T>
Var<T> sub(Tape<T>& t, Var<T> a, Var<T> b) {
  return t.record(
      t.value(a) - t.value(b), {a, b},
      [a, b](Tape<T>& tp, const Matrix<T>& g) {
        tp.accumulate(a, g);
        if (tp.requires_grad(b)) tp.accumulate(b, T{-1} * g);
      },
      "sub");
}

template <typename T>
Var<T> scale(Tape<T>& t, Var<T> a, T s) {
  return t.record(
      s * t.value(a), {a},
      [a, s](Tape<T>& tp, const Matrix<T>& g) { tp.accumulate(a, s * g); }, "scale");
}

/// x (R x C) plus a 1 x C bias added to every row.
template <typename T>
Var<T> add_row_bias(Tape<T>& t, Var<T> x, Var<T> bias) {
  const Matrix<T>& xv = t.value(x);
  const Matrix<T>& bv = t.value(bias);
  require(bv.rows() == 1 && bv.cols() == xv.cols(),
          "add_row_bias: bias " + shape_str(bv) + " does not fit " + shape_str(xv));
  Matrix<T> out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
  return t.record(
      std::move(out), {x, bias},
      [x, bias](Tape<T>& tp, const Matrix<T>& g) {
        tp.accumulate(x, g);
        if (!tp.requires_grad(bias)) return;
        Matrix<T> gb(1, g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
        tp.accumulate(bias, gb);
      },
      "add_row_bias");
}

/// Softmax restricted to a constant selection mask. The mask is not
/// differentiated: gradients flow only through selected entries.
template <typename T>
Var<T> masked_row_softmax(Tape<T>& t, Var<T> scores, const Mask& mask) {
  Matrix<T> y = masked_row_softmax(t.value(scores), mask);
  return t.record(
      y, {scores},
      [scores, y](Tape<T>& tp, const Matrix<T>& g) {
        Matrix<T> gx(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          T dot{0};
          for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * g(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) = y(i, j) * (g(i, j) - dot);
        }
        tp.accumulate(scores, gx);
      },
      "masked_row_softmax");
}

template <typename T>
T gelu_value(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Tape<T>& t, Var<T> x) {
  Matrix<T> y = t.value(x);
  for (auto& v : y.flat()) v = gelu_value(v);
  return t.record(
      std::move(y), {x},
      [x](Tape<T>& tp, const Matrix<T>& g) {
        const Matrix<T>& xv = tp.value(x);
        Matrix<T> gx(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < xv.size(); ++i)
          gx.flat()[i] = g.flat()[i] * gelu_derivative(xv.flat()[i]);
        tp.accumulate(x, gx);
      },
      "gelu");
}

template <typename T>
T sigmoid_value(T x) {
  return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

template <typename T>
Var<T> sigmoid(Tape<T>& t, Var<T> x) {
  Matrix<T> y = t.value(x);
  for (auto& v : y.flat()) v = sigmoid_value(v);
  return t.record(
      y, {x},
      [x, y](Tape<T>& tp, const Matrix<T>& g) {
        Matrix<T> gx(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.size(); ++i) {
          const T s = y.flat()[i];
          gx.flat()[i] = g.flat()[i] * s * (T{1} - s);
        }
        tp.accumulate(x, gx);
      },
      "sigmoid");
}

/// [a | b] along columns; row counts must agree.
template <typename T>
Var<T> concat_cols(Tape<T>& t, Var<T> a, Var<T> b) {
  const Matrix<T>& av = t.value(a);
  const Matrix<T>& bv = t.value(b);
  require(av.rows() == bv.rows(), "concat_cols: row mismatch " + shape_str(av) + " | " + shape_str(bv));
  Matrix<T> out(av.rows(), av.cols() + bv.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    std::copy(av.row(i).begin(), av.row(i).end(), out.row(i).begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(av.cols()));
  }
  const std::size_t split = av.cols();
  return t.record(
      std::move(out), {a, b},
      [a, b, split](Tape<T>& tp, const Matrix<T>& g) {
        Matrix<T> ga(g.rows(), split);
        Matrix<T> gb(g.rows(), g.cols() - split);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < split; ++j) ga(i, j) = g(i, j);
          for (std::size_t j = split; j < g.cols(); ++j) gb(i, j - split) = g(i, j);
        }
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
      },
      "concat_cols");
}

/// Column-wise mean over rows: R x C -> 1 x C.
template <typename T>
Var<T> mean_rows(Tape<T>& t, Var<T> x) {
  const Matrix<T>& xv = t.value(x);
  require(xv.rows() > 0, "mean_rows: empty input");
  Matrix<T> out(1, xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out(0, j) += xv(i, j);
  const T inv = T{1} / static_cast<T>(xv.rows());
  for (auto& v : out.flat()) v *= inv;
  const std::size_t rows = xv.rows();
  return t.record(
      std::move(out), {x},
      [x, rows, inv](Tape<T>& tp, const Matrix<T>& g) {
        Matrix<T> gx(rows, g.cols());
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) = g(0, j) * inv;
        tp.accumulate(x, gx);
      },
      "mean_rows");
}

/// mean of squared entries, as a 1x1 scalar.
template <typename T>
Var<T> mean_square(Tape<T>& t, Var<T> x) {
  const Matrix<T>& xv = t.value(x);
  require(xv.size() > 0, "mean_square: empty input");
  T acc{0};
  for (T v : xv.flat()) acc += v * v;
  const T n = static_cast<T>(xv.size());
  return t.record(
      Matrix<T>(1, 1, acc / n), {x},
      [x, n](Tape<T>& tp, const Matrix<T>& g) {
        Matrix<T> gx = (T{2} * g(0, 0) / n) * tp.value(x);
        tp.accumulate(x, gx);
      },
      "mean_square");
}

/// Unsquared Frobenius norm. At exactly zero the subgradient 0 is used.
template <typename T>
Var<T> frobenius_norm(Tape<T>& t, Var<T> x) {
  const T norm = frobenius_norm(t.value(x));
  return t.record(
      Matrix<T>(1, 1, norm), {x},
      [x, norm](Tape<T>& tp, const Matrix<T>& g) {
        if (norm == T{0}) return;
        tp.accumulate(x, (g(0, 0) / norm) * tp.value(x));
      },
      "frobenius_norm");
}

template <typename T>
Var<T> sum(Tape<T>& t, Var<T> x) {
  T acc{0};
  for (T v : t.value(x).flat()) acc += v;
  return t.record(
      Matrix<T>(1, 1, acc), {x},
      [x](Tape<T>& tp, const Matrix<T>& g) {
        const Matrix<T>& xv = tp.value(x);
        tp.accumulate(x, Matrix<T>(xv.rows(), xv.cols(), g(0, 0)));
      },
      "sum");
}

/// Mean over rows of R x 1 column `logits`: plain row mean, kept as its own
/// op so per-patch scoring can pool logits.
template <typename T>
Var<T> mean_all(Tape<T>& t, Var<T> x) {
  const Matrix<T>& xv = t.value(x);
  require(xv.size() > 0, "mean_all: empty input");
  T acc{0};
  for (T v : xv.flat()) acc += v;
  const T n = static_cast<T>(xv.size());
  return t.record(
      Matrix<T>(1, 1, acc / n), {x},
      [x, n](Tape<T>& tp, const Matrix<T>& g) {
        const Matrix<T>& xv2 = tp.value(x);
        tp.accumulate(x, Matrix<T>(xv2.rows(), xv2.cols(), g(0, 0) / n));
      },
      "mean_all");
}

template <typename T>
inline constexpr T kProbabilityClamp = T(1e-7);

/// Mean binary cross-entropy of probabilities `p` (R x 1) against constant
/// labels `y` (R x 1). Probabilities are clamped to [eps, 1 - eps]; the
/// clamp passes no gradient where it is active.
template <typename T>
Var<T> bce_mean(Tape<T>& t, Var<T> p, const Matrix<T>& y) {
  const Matrix<T>& pv = t.value(p);
  require(pv.same_shape(y) && pv.cols() == 1, "bce_mean: expects matching R x 1 inputs");
  const T eps = kProbabilityClamp<T>;
  T acc{0};
  for (std::size_t i = 0; i < pv.rows(); ++i) {
    const T pc = std::clamp(pv(i, 0), eps, T{1} - eps);
    acc += -y(i, 0) * std::log(pc) - (T{1} - y(i, 0)) * std::log(T{1} - pc);
  }
  const T n = static_cast<T>(pv.rows());
  return t.record(
      Matrix<T>(1, 1, acc / n), {p},
      [p, y, n, eps](Tape<T>& tp, const Matrix<T>& g) {
        const Matrix<T>& pv2 = tp.value(p);
        Matrix<T> gp(pv2.rows(), 1);
        for (std::size_t i = 0; i < pv2.rows(); ++i) {
          const T raw = pv2(i, 0);
          if (raw < eps || raw > T{1} - eps) continue;
          gp(i, 0) = g(0, 0) * (-y(i, 0) / raw + (T{1} - y(i, 0)) / (T{1} - raw)) / n;
        }
        tp.accumulate(p, gp);
      },
      "bce_mean");
}

}  // namespace refprior::num
