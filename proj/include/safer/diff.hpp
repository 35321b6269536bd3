#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// Values are computed eagerly when a node is appended. backward() walks the
// tape in reverse insertion order, which is a valid topological order because
// a node may only reference earlier nodes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "safer/errors.hpp"
#include "safer/tensor.hpp"

namespace safer::diff {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
  friend auto operator<=>(NodeId, NodeId) = default;
};

enum class Op {
  leaf,
  matmul,
  add,
  sub,
  mul_elementwise,
  scalar_mul,
  relu,
  tanh,
  exp,
  log,
  mean,
  sum,
  l2_norm,
  concat,
  softmax_logsumexp_ce,
  square,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul_elementwise: return "mul_elementwise";
    case Op::scalar_mul: return "scalar_mul";
    case Op::relu: return "relu";
    case Op::tanh: return "tanh";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::l2_norm: return "l2_norm";
    case Op::concat: return "concat";
    case Op::softmax_logsumexp_ce: return "softmax_logsumexp_ce";
    case Op::square: return "square";
  }
  return "?";
}

/// Non-tensor operation arguments. `scalar` is the factor of scalar_mul;
/// `target` is the per-row target distribution of softmax_logsumexp_ce.
struct OpAttrs {
  double scalar = 0.0;
  Tensor target;
};

/// Gradients of requires_grad leaves after backward().
class Gradients {
 public:
  explicit Gradients(std::size_t n) : grads_(n) {}

  bool has(NodeId id) const { return id.index < grads_.size() && grads_[id.index].has_value(); }

  const Tensor& at(NodeId id) const {
    if (!has(id)) throw ContractError("no gradient recorded for node " + std::to_string(id.index));
    return *grads_[id.index];
  }

  void set(NodeId id, Tensor g) { grads_[id.index] = std::move(g); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

namespace detail {

// Row-broadcast kinds accepted by add/sub for the right operand.
enum class Broadcast { none, scalar, row };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, Op op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.size() == 1) return Broadcast::scalar;
  if (a.rank() == 2 && b.size() == a.cols() && (b.rank() == 1 || (b.rank() == 2 && b.rows() == 1))) {
    return Broadcast::row;
  }
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* brow = &b.values()[p * n];
      double* orow = &out.values()[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// out = a^T * b for a [k,m], b [k,n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      if (av == 0.0) continue;
      const double* brow = &b.values()[p * n];
      double* orow = &out.values()[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// out = a * b^T for a [m,k], b [n,k]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &a.values()[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = &b.values()[j * k];
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  return out;
}

inline double log_sum_exp(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Row-wise softmax of a logits matrix (rank 1 treated as one row).
inline Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const double lse = detail::log_sum_exp(logits.row(r));
    auto o = out.row(r);
    for (auto& v : o) v = std::exp(v - lse);
  }
  return out;
}

/// One-hot target rows for integer labels.
inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    t(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return t;
}

class Graph {
 public:
  NodeId leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{Op::leaf, {}, {}, std::move(value), requires_grad, requires_grad});
    return NodeId{nodes_.size() - 1};
  }

  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return node(id).value; }
  Op op(NodeId id) const { return node(id).op; }
  std::span<const NodeId> inputs(NodeId id) const { return node(id).inputs; }

  /// Scalar value of a single-element node.
  double scalar(NodeId id) const {
    const Tensor& v = value(id);
    if (v.size() != 1) throw ContractError("node is not scalar: shape " + shape_string(v.shape()));
    return v[0];
  }

  NodeId apply(Op op, std::span<const NodeId> in, OpAttrs attrs = {}) {
    for (NodeId i : in) {
      if (i.index >= nodes_.size()) throw ContractError(std::string(op_name(op)) + ": unknown input node");
    }
    Tensor out = forward(op, in, attrs);
    bool needs = false;
    for (NodeId i : in) needs = needs || nodes_[i.index].needs_grad;
    nodes_.push_back(Node{op, std::vector<NodeId>(in.begin(), in.end()), std::move(attrs), std::move(out), false, needs});
    return NodeId{nodes_.size() - 1};
  }

  NodeId apply(Op op, std::initializer_list<NodeId> in, OpAttrs attrs = {}) {
    return apply(op, std::span<const NodeId>(in.begin(), in.size()), std::move(attrs));
  }

  /// Gradient of a scalar node with respect to every requires_grad leaf.
  /// Each call starts from zeroed accumulators.
  Gradients backward(NodeId output) const {
    if (value(output).size() != 1) {
      throw ContractError("backward: output must be scalar, got shape " + shape_string(value(output).shape()));
    }
    std::vector<std::optional<Tensor>> acc(output.index + 1);
    acc[output.index] = Tensor(value(output).shape(), 1.0);

    for (std::size_t k = output.index + 1; k-- > 0;) {
      if (!acc[k]) continue;
      const Node& n = nodes_[k];
      if (n.op == Op::leaf || !n.needs_grad) continue;
      propagate(n, *acc[k], acc);
      if (k != output.index) acc[k].reset();
    }

    Gradients grads(nodes_.size());
    for (std::size_t k = 0; k <= output.index; ++k) {
      const Node& n = nodes_[k];
      if (n.op == Op::leaf && n.requires_grad) {
        grads.set(NodeId{k}, acc[k] ? std::move(*acc[k]) : Tensor(n.value.shape(), 0.0));
      }
    }
    return grads;
  }

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    OpAttrs attrs;
    Tensor value;
    bool requires_grad;
    bool needs_grad;
  };

  const Node& node(NodeId id) const {
    if (id.index >= nodes_.size()) throw ContractError("unknown node " + std::to_string(id.index));
    return nodes_[id.index];
  }

  static void expect_arity(Op op, std::span<const NodeId> in, std::size_t n) {
    if (in.size() != n) {
      throw ContractError(std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs, got " +
                          std::to_string(in.size()));
    }
  }

  Tensor forward(Op op, std::span<const NodeId> in, const OpAttrs& attrs) const {
    auto unary = [&](auto fn) {
      expect_arity(op, in, 1);
      Tensor out = nodes_[in[0].index].value;
      for (auto& v : out.values()) v = fn(v);
      return out;
    };
    switch (op) {
      case Op::leaf:
        throw ContractError("apply: use leaf() to create leaves");
      case Op::matmul: {
        expect_arity(op, in, 2);
        const Tensor& a = nodes_[in[0].index].value;
        const Tensor& b = nodes_[in[1].index].value;
        if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
          throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                           shape_string(b.shape()));
        }
        return detail::matmul_values(a, b);
      }
      case Op::add:
      case Op::sub: {
        expect_arity(op, in, 2);
        const Tensor& a = nodes_[in[0].index].value;
        const Tensor& b = nodes_[in[1].index].value;
        const auto kind = detail::broadcast_kind(a, b, op);
        const double sign = op == Op::add ? 1.0 : -1.0;
        Tensor out = a;
        for (std::size_t i = 0; i < out.size(); ++i) {
          const double bv = kind == detail::Broadcast::none     ? b[i]
                            : kind == detail::Broadcast::scalar ? b[0]
                                                                : b[i % a.cols()];
          out[i] += sign * bv;
        }
        return out;
      }
      case Op::mul_elementwise: {
        expect_arity(op, in, 2);
        const Tensor& a = nodes_[in[0].index].value;
        const Tensor& b = nodes_[in[1].index].value;
        if (a.shape() != b.shape()) {
          throw ShapeError("mul_elementwise: incompatible shapes " + shape_string(a.shape()) + " and " +
                           shape_string(b.shape()));
        }
        Tensor out = a;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
        return out;
      }
      case Op::scalar_mul:
        return unary([s = attrs.scalar](double v) { return s * v; });
      case Op::relu:
        return unary([](double v) { return v > 0.0 ? v : 0.0; });
      case Op::tanh:
        return unary([](double v) { return std::tanh(v); });
      case Op::exp:
        return unary([](double v) { return std::exp(v); });
      case Op::log: {
        expect_arity(op, in, 1);
        for (double v : nodes_[in[0].index].value.values()) {
          if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
        }
        return unary([](double v) { return std::log(v); });
      }
      case Op::square:
        return unary([](double v) { return v * v; });
      case Op::sum:
      case Op::mean: {
        expect_arity(op, in, 1);
        const Tensor& a = nodes_[in[0].index].value;
        if (a.size() == 0) throw ShapeError(std::string(op_name(op)) + ": empty input");
        double s = 0.0;
        for (double v : a.values()) s += v;
        return Tensor::scalar(op == Op::mean ? s / static_cast<double>(a.size()) : s);
      }
      case Op::l2_norm: {
        expect_arity(op, in, 1);
        const Tensor& a = nodes_[in[0].index].value;
        std::vector<double> out(a.rows());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double s = 0.0;
          for (double v : a.row(r)) s += v * v;
          out[r] = std::sqrt(s);
        }
        return Tensor::vector(std::move(out));
      }
      case Op::concat: {
        if (in.empty()) throw ContractError("concat: no inputs");
        const std::size_t rows = nodes_[in[0].index].value.rows();
        const std::size_t rank = nodes_[in[0].index].value.rank();
        std::size_t cols = 0;
        for (NodeId i : in) {
          const Tensor& t = nodes_[i.index].value;
          if (t.rows() != rows || t.rank() != rank) {
            throw ShapeError("concat: incompatible shapes " + shape_string(nodes_[in[0].index].value.shape()) +
                             " and " + shape_string(t.shape()));
          }
          cols += t.cols();
        }
        std::vector<double> out;
        out.reserve(rows * cols);
        for (std::size_t r = 0; r < rows; ++r) {
          for (NodeId i : in) {
            auto row = nodes_[i.index].value.row(r);
            out.insert(out.end(), row.begin(), row.end());
          }
        }
        return rank == 2 ? Tensor({rows, cols}, std::move(out)) : Tensor::vector(std::move(out));
      }
      case Op::softmax_logsumexp_ce: {
        expect_arity(op, in, 1);
        const Tensor& logits = nodes_[in[0].index].value;
        const Tensor& q = attrs.target;
        if (q.rows() != logits.rows() || q.cols() != logits.cols() || logits.size() == 0) {
          throw ShapeError("softmax_logsumexp_ce: logits " + shape_string(logits.shape()) + " vs target " +
                           shape_string(q.shape()));
        }
        double total = 0.0;
        for (std::size_t r = 0; r < logits.rows(); ++r) {
          const auto l = logits.row(r);
          const auto qr = q.row(r);
          const double lse = detail::log_sum_exp(l);
          for (std::size_t i = 0; i < l.size(); ++i) {
            if (qr[i] < 0.0) throw DomainError("softmax_logsumexp_ce: negative target mass");
            if (qr[i] > 0.0) total += qr[i] * (std::log(qr[i]) - (l[i] - lse));
          }
        }
        return Tensor::scalar(total / static_cast<double>(logits.rows()));
      }
    }
    throw ContractError("unknown op");
  }

  void accumulate(std::vector<std::optional<Tensor>>& acc, NodeId id, const Tensor& g) const {
    const Node& n = nodes_[id.index];
    if (!n.needs_grad) return;
    auto& slot = acc[id.index];
    if (!slot) {
      slot = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
  }

  void propagate(const Node& n, const Tensor& g, std::vector<std::optional<Tensor>>& acc) const {
    auto in_value = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k].index].value; };
    auto elementwise = [&](auto dfn) {
      const Tensor& x = in_value(0);
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g[i] * dfn(x[i], n.value[i]);
      accumulate(acc, n.inputs[0], dx);
    };

    switch (n.op) {
      case Op::leaf:
        return;
      case Op::matmul: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        if (nodes_[n.inputs[0].index].needs_grad) accumulate(acc, n.inputs[0], detail::matmul_nt(g, b));
        if (nodes_[n.inputs[1].index].needs_grad) accumulate(acc, n.inputs[1], detail::matmul_tn(a, g));
        return;
      }
      case Op::add:
      case Op::sub: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        accumulate(acc, n.inputs[0], g);
        if (!nodes_[n.inputs[1].index].needs_grad) return;
        const double sign = n.op == Op::add ? 1.0 : -1.0;
        const auto kind = detail::broadcast_kind(a, b, n.op);
        Tensor db(b.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t j = kind == detail::Broadcast::none ? i : kind == detail::Broadcast::scalar ? 0 : i % a.cols();
          db[j] += sign * g[i];
        }
        accumulate(acc, n.inputs[1], db);
        return;
      }
      case Op::mul_elementwise: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        Tensor da(a.shape()), db(b.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] = g[i] * b[i];
          db[i] = g[i] * a[i];
        }
        accumulate(acc, n.inputs[0], da);
        accumulate(acc, n.inputs[1], db);
        return;
      }
      case Op::scalar_mul:
        elementwise([s = n.attrs.scalar](double, double) { return s; });
        return;
      case Op::relu:
        elementwise([](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
        return;
      case Op::tanh:
        elementwise([](double, double y) { return 1.0 - y * y; });
        return;
      case Op::exp:
        elementwise([](double, double y) { return y; });
        return;
      case Op::log:
        elementwise([](double x, double) { return 1.0 / x; });
        return;
      case Op::square:
        elementwise([](double x, double) { return 2.0 * x; });
        return;
      case Op::sum:
      case Op::mean: {
        const Tensor& x = in_value(0);
        const double scale = n.op == Op::mean ? g[0] / static_cast<double>(x.size()) : g[0];
        accumulate(acc, n.inputs[0], Tensor(x.shape(), scale));
        return;
      }
      case Op::l2_norm: {
        const Tensor& x = in_value(0);
        Tensor dx(x.shape());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const double norm = n.value[r];
          if (norm == 0.0) continue;  // subgradient 0 at the origin
          auto xr = x.row(r);
          auto dr = dx.row(r);
          for (std::size_t c = 0; c < xr.size(); ++c) dr[c] = g[r] * xr[c] / norm;
        }
        accumulate(acc, n.inputs[0], dx);
        return;
      }
      case Op::concat: {
        std::size_t offset = 0;
        const std::size_t total = n.value.cols();
        for (NodeId id : n.inputs) {
          const Tensor& x = nodes_[id.index].value;
          Tensor dx(x.shape());
          for (std::size_t r = 0; r < x.rows(); ++r) {
            for (std::size_t c = 0; c < x.cols(); ++c) dx(r, c) = g[r * total + offset + c];
          }
          offset += x.cols();
          accumulate(acc, id, dx);
        }
        return;
      }
      case Op::softmax_logsumexp_ce: {
        const Tensor& logits = in_value(0);
        const Tensor& q = n.attrs.target;
        Tensor dl = softmax_rows(logits);
        const double scale = g[0] / static_cast<double>(logits.rows());
        for (std::size_t r = 0; r < logits.rows(); ++r) {
          const auto qr = q.row(r);
          double mass = 0.0;
          for (double v : qr) mass += v;
          auto dr = dl.row(r);
          for (std::size_t i = 0; i < dr.size(); ++i) dr[i] = scale * (mass * dr[i] - qr[i]);
        }
        accumulate(acc, n.inputs[0], dl);
        return;
      }
    }
  }

  std::vector<Node> nodes_;
};

// Convenience wrappers so loss code reads as expressions.

inline NodeId matmul(Graph& g, NodeId a, NodeId b) { return g.apply(Op::matmul, {a, b}); }
inline NodeId add(Graph& g, NodeId a, NodeId b) { return g.apply(Op::add, {a, b}); }
inline NodeId sub(Graph& g, NodeId a, NodeId b) { return g.apply(Op::sub, {a, b}); }
inline NodeId mul(Graph& g, NodeId a, NodeId b) { return g.apply(Op::mul_elementwise, {a, b}); }
inline NodeId scale(Graph& g, NodeId a, double s) { return g.apply(Op::scalar_mul, {a}, OpAttrs{s, {}}); }
inline NodeId relu(Graph& g, NodeId a) { return g.apply(Op::relu, {a}); }
inline NodeId tanh(Graph& g, NodeId a) { return g.apply(Op::tanh, {a}); }
inline NodeId exp(Graph& g, NodeId a) { return g.apply(Op::exp, {a}); }
inline NodeId log(Graph& g, NodeId a) { return g.apply(Op::log, {a}); }
inline NodeId square(Graph& g, NodeId a) { return g.apply(Op::square, {a}); }
inline NodeId sum(Graph& g, NodeId a) { return g.apply(Op::sum, {a}); }
inline NodeId mean(Graph& g, NodeId a) { return g.apply(Op::mean, {a}); }
inline NodeId l2_norm(Graph& g, NodeId a) { return g.apply(Op::l2_norm, {a}); }
inline NodeId concat(Graph& g, NodeId a, NodeId b) { return g.apply(Op::concat, {a, b}); }

inline NodeId add_scalar(Graph& g, NodeId a, double c) { return add(g, a, g.constant(Tensor::scalar(c))); }

/// 1 / a, composed from log and exp; `a` must be positive.
inline NodeId reciprocal(Graph& g, NodeId a) { return exp(g, scale(g, log(g, a), -1.0)); }

/// Mean over rows of KL(target_row || softmax(logits_row)); equals the usual
/// cross-entropy when each target row is one-hot.
inline NodeId softmax_cross_entropy(Graph& g, NodeId logits, Tensor target) {
  return g.apply(Op::softmax_logsumexp_ce, {logits}, OpAttrs{0.0, std::move(target)});
}

inline NodeId softmax_cross_entropy(Graph& g, NodeId logits, std::span<const int> labels) {
  return softmax_cross_entropy(g, logits, one_hot(labels, g.value(logits).cols()));
}

/// Builds a scalar loss on a fresh graph from one leaf per point tensor.
using GraphFunction = std::function<NodeId(Graph&, std::span<const NodeId>)>;

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

/// Compares the tape gradient with central differences at every coordinate.
/// Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradientCheck finite_difference_check(const GraphFunction& fn, std::vector<Tensor> point, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_check: eps must be positive");

  auto evaluate = [&](const std::vector<Tensor>& at) {
    Graph g;
    std::vector<NodeId> leaves;
    leaves.reserve(at.size());
    for (const auto& t : at) leaves.push_back(g.leaf(t, false));
    const double v = g.scalar(fn(g, leaves));
    if (!std::isfinite(v)) throw DomainError("finite_difference_check: non-finite function value");
    return v;
  };

  Graph g;
  std::vector<NodeId> leaves;
  leaves.reserve(point.size());
  for (const auto& t : point) leaves.push_back(g.leaf(t, true));
  const NodeId out = fn(g, leaves);
  if (!std::isfinite(g.scalar(out))) throw DomainError("finite_difference_check: non-finite function value");
  const Gradients grads = g.backward(out);

  GradientCheck result;
  for (std::size_t t = 0; t < point.size(); ++t) {
    const Tensor& analytic = grads.at(leaves[t]);
    for (std::size_t i = 0; i < point[t].size(); ++i) {
      const double orig = point[t][i];
      point[t][i] = orig + eps;
      const double up = evaluate(point);
      point[t][i] = orig - eps;
      const double down = evaluate(point);
      point[t][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      if (err > result.max_rel_error) result = {err, t, i};
    }
  }
  return result;
}

}  // namespace safer::diff
