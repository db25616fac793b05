#pragma once

// Reverse-mode automatic differentiation over batched column matrices.
//
// Every node holds a (features x batch) matrix; column j is sample j. Nodes are
// appended in evaluation order, so the node list is already a topological order
// and backward is a single reverse sweep.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "didr/errors.hpp"

namespace didr::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAffine,     // W * x + b
  kAdd,
  kSub,
  kMul,        // elementwise
  kScale,      // c * a
  kScaleCols,  // a with column j scaled by aux(0, j)
  kAddConst,   // a + aux
  kSilu,
  kSigmoid,
  kSquare,
  kExp,
  kSum,        // 1x1 total
  kConcatRows,
  kPointwise,  // f(a) with caller-supplied local derivative
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAffine: return "affine";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kScaleCols: return "scale_cols";
    case Op::kAddConst: return "add_const";
    case Op::kSilu: return "silu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSquare: return "square";
    case Op::kExp: return "exp";
    case Op::kSum: return "sum";
    case Op::kConcatRows: return "concat_rows";
    case Op::kPointwise: return "pointwise";
  }
  return "?";
}

/// x sigmoid(x), elementwise and vectorized; exp overflow for very negative x gives -0.
inline Matrix silu_value(const Matrix& x) { return (x.array() / (1.0 + (-x.array()).exp())).matrix(); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }

  void clear() {
    nodes_.clear();
    grads_.clear();
    last_visits_ = 0;
  }

  Var leaf(Matrix value, bool requires_grad) {
    return push(Op::kLeaf, {}, {}, std::move(value), Matrix{}, 0.0, requires_grad);
  }

  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var affine(Var weight, Var bias, Var x) {
    const Matrix& w = value(weight);
    const Matrix& b = value(bias);
    const Matrix& in = value(x);
    if (w.cols() != in.rows() || b.rows() != w.rows() || b.cols() != 1) {
      throw ConfigError("affine: shape mismatch, weight " + shape(w) + ", bias " + shape(b) +
                        ", input " + shape(in));
    }
    Matrix out = w * in;
    out.colwise() += b.col(0);
    return push(Op::kAffine, weight, bias, std::move(out), Matrix{}, 0.0, false, x);
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    return push(Op::kAdd, a, b, value(a) + value(b));
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    return push(Op::kSub, a, b, value(a) - value(b));
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    return push(Op::kMul, a, b, value(a).cwiseProduct(value(b)));
  }

  Var scale(Var a, double c) { return push(Op::kScale, a, {}, c * value(a), Matrix{}, c); }

  /// Column j multiplied by factors(j). Factors are constants.
  Var scale_cols(Var a, const RowVector& factors) {
    if (factors.size() != value(a).cols()) throw ConfigError("scale_cols: batch size mismatch");
    Matrix out = value(a) * factors.asDiagonal();
    Matrix aux = factors;
    return push(Op::kScaleCols, a, {}, std::move(out), std::move(aux));
  }

  Var add_const(Var a, const Matrix& c) {
    if (c.rows() != value(a).rows() || c.cols() != value(a).cols()) {
      throw ConfigError("add_const: shape mismatch");
    }
    return push(Op::kAddConst, a, {}, value(a) + c);
  }

  Var silu(Var a) {
    return push(Op::kSilu, a, {}, silu_value(value(a)));
  }

  Var sigmoid(Var a) {
    Matrix out = value(a).unaryExpr([](double v) { return ad::sigmoid(v); });
    return push(Op::kSigmoid, a, {}, std::move(out));
  }

  Var square(Var a) { return push(Op::kSquare, a, {}, value(a).array().square().matrix()); }

  Var exp(Var a) { return push(Op::kExp, a, {}, value(a).array().exp().matrix()); }

  Var sum(Var a) {
    Matrix out(1, 1);
    out(0, 0) = value(a).sum();
    return push(Op::kSum, a, {}, std::move(out));
  }

  Var mean(Var a) {
    const auto n = static_cast<double>(value(a).size());
    return scale(sum(a), 1.0 / n);
  }

  Var concat_rows(Var top, Var bottom) {
    const Matrix& a = value(top);
    const Matrix& b = value(bottom);
    if (a.cols() != b.cols()) throw ConfigError("concat_rows: batch size mismatch");
    Matrix out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return push(Op::kConcatRows, top, bottom, std::move(out));
  }

  /// Elementwise scalar function of `a`: the caller supplies f(a) and f'(a).
  Var pointwise(Var a, Matrix value, Matrix derivative) {
    const Matrix& x = this->value(a);
    if (value.rows() != x.rows() || value.cols() != x.cols() || derivative.rows() != x.rows() ||
        derivative.cols() != x.cols()) {
      throw ConfigError("pointwise: shape mismatch");
    }
    return push(Op::kPointwise, a, {}, std::move(value), std::move(derivative));
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const { return value(v)(0, 0); }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Reverse sweep from `output` seeded with `seed` (same shape as the output).
  void backward(Var output, const Matrix& seed) {
    if (nodes_.empty()) throw UsageError("backward called on an empty tape");
    if (output.tape != this || output.id >= nodes_.size()) throw UsageError("backward: foreign node");
    const Matrix& out = value(output);
    if (seed.rows() != out.rows() || seed.cols() != out.cols()) {
      throw ConfigError("backward: seed " + shape(seed) + " does not match output " + shape(out));
    }
    grads_.assign(nodes_.size(), Matrix{});
    grads_[output.id] = seed;
    last_visits_ = 0;
    for (std::int64_t i = output.id; i >= 0; --i) {
      const auto idx = static_cast<std::size_t>(i);
      if (grads_[idx].size() == 0) continue;
      ++last_visits_;
      propagate(idx);
    }
  }

  /// Seed of ones, for scalar outputs.
  void backward(Var output) {
    if (nodes_.empty()) throw UsageError("backward called on an empty tape");
    if (output.tape != this || output.id >= nodes_.size()) throw UsageError("backward: foreign node");
    backward(output, Matrix::Ones(value(output).rows(), value(output).cols()));
  }

  bool has_grad(Var v) const { return v.id < grads_.size() && grads_[v.id].size() != 0; }

  /// Gradient of the last backward seed with respect to `v`. Zero if unreached.
  Matrix grad(Var v) const {
    if (has_grad(v)) return grads_[v.id];
    const Matrix& val = value(v);
    return Matrix::Zero(val.rows(), val.cols());
  }

  /// Number of nodes processed by the last backward sweep.
  std::size_t last_visits() const noexcept { return last_visits_; }

 private:
  struct Node {
    Op op;
    std::uint32_t a;
    std::uint32_t b;
    std::uint32_t c;
    bool requires_grad;
    double scalar;
    Matrix value;
    Matrix aux;
  };

  static std::string shape(const Matrix& m) {
    return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
  }

  void check_same(Var a, Var b, const char* what) const {
    const Matrix& x = value(a);
    const Matrix& y = value(b);
    if (x.rows() != y.rows() || x.cols() != y.cols()) {
      throw ConfigError(std::string(what) + ": shape mismatch " + shape(x) + " vs " + shape(y));
    }
  }

  Var push(Op op, Var a, Var b, Matrix value, Matrix aux = Matrix{}, double scalar = 0.0,
           bool leaf_requires = false, Var c = {}) {
    const bool has_a = op != Op::kLeaf;
    const bool has_b = op == Op::kAffine || op == Op::kAdd || op == Op::kSub || op == Op::kMul ||
                       op == Op::kConcatRows;
    const bool has_c = op == Op::kAffine;
    const auto check = [&](bool used, Var in) {
      if (used && (in.tape != this || in.id >= nodes_.size())) {
        throw UsageError(std::string(op_name(op)) + ": input from another tape");
      }
    };
    check(has_a, a);
    check(has_b, b);
    check(has_c, c);
    bool needs = leaf_requires;
    if (has_a) needs = needs || nodes_[a.id].requires_grad;
    if (has_b) needs = needs || nodes_[b.id].requires_grad;
    if (has_c) needs = needs || nodes_[c.id].requires_grad;
    nodes_.push_back(Node{op, a.id, b.id, c.id, needs, scalar, std::move(value), std::move(aux)});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void accumulate(std::uint32_t id, const Matrix& g) {
    if (!nodes_[id].requires_grad) return;
    Matrix& slot = grads_[id];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  }

  template <typename Expr>
  void accumulate_expr(std::uint32_t id, const Expr& g) {
    if (!nodes_[id].requires_grad) return;
    Matrix& slot = grads_[id];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  }

  void propagate(std::size_t idx) {
    const Node& n = nodes_[idx];
    const Matrix& g = grads_[idx];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAffine: {
        // a = weight, b = bias, c = input
        const Matrix& w = nodes_[n.a].value;
        const Matrix& x = nodes_[n.c].value;
        if (nodes_[n.a].requires_grad) accumulate_expr(n.a, g * x.transpose());
        if (nodes_[n.b].requires_grad) accumulate_expr(n.b, g.rowwise().sum());
        if (nodes_[n.c].requires_grad) accumulate_expr(n.c, w.transpose() * g);
        break;
      }
      case Op::kAdd:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::kSub:
        accumulate(n.a, g);
        accumulate_expr(n.b, -g);
        break;
      case Op::kMul:
        if (nodes_[n.a].requires_grad) accumulate_expr(n.a, g.cwiseProduct(nodes_[n.b].value));
        if (nodes_[n.b].requires_grad) accumulate_expr(n.b, g.cwiseProduct(nodes_[n.a].value));
        break;
      case Op::kScale:
        accumulate_expr(n.a, n.scalar * g);
        break;
      case Op::kScaleCols:
        accumulate_expr(n.a, g * n.aux.row(0).asDiagonal());
        break;
      case Op::kAddConst:
        accumulate(n.a, g);
        break;
      case Op::kSilu: {
        const auto x = nodes_[n.a].value.array();
        const Matrix s = (1.0 + (-x).exp()).inverse().matrix();
        accumulate_expr(n.a, g.cwiseProduct((s.array() * (1.0 + x * (1.0 - s.array()))).matrix()));
        break;
      }
      case Op::kSigmoid: {
        const Matrix& s = n.value;
        accumulate_expr(n.a, g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
        break;
      }
      case Op::kSquare:
        accumulate_expr(n.a, 2.0 * g.cwiseProduct(nodes_[n.a].value));
        break;
      case Op::kExp:
        accumulate_expr(n.a, g.cwiseProduct(n.value));
        break;
      case Op::kSum: {
        const Matrix& x = nodes_[n.a].value;
        accumulate_expr(n.a, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
        break;
      }
      case Op::kConcatRows: {
        const auto top = nodes_[n.a].value.rows();
        const auto bottom = nodes_[n.b].value.rows();
        if (nodes_[n.a].requires_grad) accumulate_expr(n.a, g.topRows(top));
        if (nodes_[n.b].requires_grad) accumulate_expr(n.b, g.bottomRows(bottom));
        break;
      }
      case Op::kPointwise:
        accumulate_expr(n.a, g.cwiseProduct(n.aux));
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  std::size_t last_visits_ = 0;
};

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator*(double c, Var a) { return a.tape->scale(a, c); }

}  // namespace didr::ad
