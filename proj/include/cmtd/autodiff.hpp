#pragma once

// Recorded-tape reverse-mode automatic differentiation over cmtd::Tensor.
//
// A Tape owns an append-only list of nodes. Each op evaluates eagerly,
// appends its result together with a gradient rule, and returns a Var
// handle. backward() walks the tape once in reverse order; because nodes are
// only ever appended after their inputs, that order is topological.

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmtd/error.hpp"
#include "cmtd/rng.hpp"
#include "cmtd/tensor.hpp"

namespace cmtd {

enum class OpKind {
  leaf,
  conv2d,
  maxpool,
  relu,
  dense,
  softmax,
  log,
  add,
  sub,
  elementwise_mul,
  scalar_mul,
  add_scalar,
  tanh,
  clip,
  sum,
  mean,
  cross_entropy_with_logits,
  negate,
  dropout,
  reshape,
  pick,
  max_excluding,
  row_sum,
};

constexpr std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::conv2d: return "conv2d";
    case OpKind::maxpool: return "maxpool";
    case OpKind::relu: return "relu";
    case OpKind::dense: return "dense";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::tanh: return "tanh";
    case OpKind::clip: return "clip";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::cross_entropy_with_logits: return "cross_entropy_with_logits";
    case OpKind::negate: return "negate";
    case OpKind::dropout: return "dropout";
    case OpKind::reshape: return "reshape";
    case OpKind::pick: return "pick";
    case OpKind::max_excluding: return "max_excluding";
    case OpKind::row_sum: return "row_sum";
  }
  return "unknown";
}

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Result of a backward pass: one gradient per node that requires grad.
class GradientMap {
 public:
  const Tensor& operator[](Var v) const { return at(v.id()); }

  const Tensor& at(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= grads_.size() || !present_[id]) {
      throw Error("gradient map: node " + std::to_string(id) + " carries no gradient");
    }
    return grads_[id];
  }

  bool contains(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) < grads_.size() && present_[id];
  }

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

class Tape {
 public:
  // grad_out is d(output)/d(node); input_grads[i] is the accumulation buffer
  // of input i, or nullptr when that input does not require grad.
  using BackwardFn = std::function<void(const Tape&, const Tensor& grad_out,
                                        std::span<Tensor* const> input_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.op = OpKind::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  // Leaf that refers to caller-owned storage; `value` must outlive the tape.
  Var borrow(const Tensor& value, bool requires_grad) {
    Node n;
    n.op = OpKind::leaf;
    n.value = Tensor(Shape{0});
    n.external = &value;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(int id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  OpKind op(int id) const { return nodes_.at(id).op; }
  const std::vector<int>& inputs(int id) const { return nodes_.at(id).inputs; }

  // Appends an op node. Inputs must already be on this tape.
  Var record(OpKind op, std::vector<int> inputs, Tensor value, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string("op ") + std::string(op_name(op)) +
                         " produced non-finite values");
    }
    Node n;
    n.op = op;
    n.requires_grad = false;
    for (int in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in).requires_grad;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  // With tracking on, non-differentiable ops (relu, maxpool, clip,
  // max_excluding) fold their branch decisions into a signature. Two
  // evaluations with equal signatures took the same piecewise-smooth branch.
  // Off by default: hashing every activation is not free.
  void track_branches(bool on) { track_ = on; }
  bool tracks_branches() const { return track_; }
  void note_branch(std::uint64_t h) { branch_ = fnv1a(&h, sizeof h, branch_ ^ 0x9e37ULL); }
  std::uint64_t branch_signature() const { return branch_; }

  GradientMap backward(Var output) const {
    if (output.tape_ != this) throw Error("backward: output is not on this tape");
    const Tensor& out = value(output.id());
    if (out.rank() != 0) {
      throw ShapeError("backward: output must be rank-0, got shape " + shape_str(out.shape()));
    }
    GradientMap g;
    g.grads_.resize(nodes_.size());
    g.present_.assign(nodes_.size(), false);
    if (nodes_[output.id()].requires_grad) {
      g.grads_[output.id()] = Tensor::scalar(1.0);
      g.present_[output.id()] = true;
    }
    std::vector<Tensor*> in_grads;
    for (int id = output.id(); id >= 0; --id) {
      const Node& n = nodes_[id];
      if (!n.requires_grad || !g.present_[id] || !n.backward) continue;
      in_grads.assign(n.inputs.size(), nullptr);
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const int in = n.inputs[i];
        if (!nodes_[in].requires_grad) continue;
        if (!g.present_[in]) {
          g.grads_[in] = Tensor(value(in).shape());
          g.present_[in] = true;
        }
        in_grads[i] = &g.grads_[in];
      }
      n.backward(*this, g.grads_[id], in_grads);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].requires_grad && !g.present_[id]) {
        g.grads_[id] = Tensor(value(static_cast<int>(id)).shape());
        g.present_[id] = true;
      }
    }
    return g;
  }

 private:
  struct Node {
    OpKind op = OpKind::leaf;
    std::vector<int> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  std::deque<Node> nodes_;  // deque: values stay put while the tape grows
  std::uint64_t branch_ = 0;
  bool track_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void same_tape(Var a, Var b, OpKind op) {
  if (&a.tape() != &b.tape()) {
    throw Error(std::string(op_name(op)) + ": operands live on different tapes");
  }
}

inline void same_shape(Var a, Var b, OpKind op) {
  same_tape(a, b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

inline void need_rank(Var a, std::size_t lo, std::size_t hi, OpKind op) {
  if (a.value().rank() < lo || a.value().rank() > hi) {
    throw ShapeError(std::string(op_name(op)) + ": unsupported shape " + shape_str(a.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Unary elementwise op with derivative computed from (input, output).
template <typename F, typename D>
Var unary(Var x, OpKind op, F f, D df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const int xid = x.id();
  return x.tape().record(op, {xid}, std::move(y),
                         [xid, df, out_id = static_cast<int>(x.tape().size())](
                             const Tape& t, const Tensor& g, std::span<Tensor* const> in) {
                           const Tensor& xv = t.value(xid);
                           const Tensor& yv = t.value(out_id);
                           Tensor& gx = *in[0];
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             gx[i] += g[i] * df(xv[i], yv[i]);
                           }
                         });
}

// Hash of the predicate over every element of `t`.
template <typename P>
std::uint64_t hash_predicate(const Tensor& t, P pred) {
  std::vector<std::uint64_t> words((t.size() + 63) / 64, 0);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (pred(t[i])) words[i / 64] |= std::uint64_t{1} << (i % 64);
  return fnv1a(words.data(), words.size() * sizeof(std::uint64_t), t.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var relu(Var x) {
  if (x.tape().tracks_branches())
    x.tape().note_branch(detail::hash_predicate(x.value(), [](double v) { return v > 0.0; }));
  return detail::unary(
      x, OpKind::relu, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var x) {
  return detail::unary(
      x, OpKind::tanh, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

constexpr double kLogFloor = 1e-300;

// Natural log with the argument floored at kLogFloor.
inline Var log(Var x) {
  return detail::unary(
      x, OpKind::log, [](double v) { return std::log(std::max(v, kLogFloor)); },
      [](double v, double) { return v > kLogFloor ? 1.0 / v : 0.0; });
}

inline Var negate(Var x) {
  return detail::unary(
      x, OpKind::negate, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Var scalar_mul(Var x, double s) {
  return detail::unary(
      x, OpKind::scalar_mul, [s](double v) { return s * v; },
      [s](double, double) { return s; });
}

inline Var add_scalar(Var x, double s) {
  return detail::unary(
      x, OpKind::add_scalar, [s](double v) { return v + s; },
      [](double, double) { return 1.0; });
}

// Gradient passes where lo <= x <= hi (boundary counts as inside), zero elsewhere.
inline Var clip(Var x, double lo, double hi) {
  if (lo > hi) throw ConfigError("clip: lo > hi");
  if (x.tape().tracks_branches()) {
    x.tape().note_branch(
        detail::hash_predicate(x.value(), [lo, hi](double v) { return v >= lo && v <= hi; }));
  }
  return detail::unary(
      x, OpKind::clip, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return v >= lo && v <= hi ? 1.0 : 0.0; });
}

namespace detail {

template <typename F, typename Da, typename Db>
Var binary(Var a, Var b, OpKind op, F f, Da da, Db db) {
  same_shape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i]);
  const int aid = a.id();
  const int bid = b.id();
  return a.tape().record(op, {aid, bid}, std::move(y),
                         [aid, bid, da, db](const Tape& t, const Tensor& g,
                                            std::span<Tensor* const> in) {
                           const Tensor& av = t.value(aid);
                           const Tensor& bv = t.value(bid);
                           if (in[0]) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*in[0])[i] += g[i] * da(av[i], bv[i]);
                           }
                           if (in[1]) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*in[1])[i] += g[i] * db(av[i], bv[i]);
                           }
                         });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, OpKind::add, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, OpKind::sub, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      a, b, OpKind::elementwise_mul, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return negate(a); }
inline Var operator*(double s, Var a) { return scalar_mul(a, s); }
inline Var operator*(Var a, double s) { return scalar_mul(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }

// Inverted dropout: kept units are scaled by 1/(1-rate). Identity when not
// training. The mask is drawn from SplitMix64(seed).
inline Var dropout(Var x, double rate, bool training, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0,1)");
  const Tensor& xv = x.value();
  Tensor mask(xv.shape(), 1.0);
  if (training && rate > 0.0) {
    SplitMix64 rng(seed);
    const double keep = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < rate ? 0.0 : keep;
  }
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * mask[i];
  auto m = std::make_shared<Tensor>(std::move(mask));
  return x.tape().record(OpKind::dropout, {x.id()}, std::move(y),
                         [m](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * (*m)[i];
                         });
}

// ---------------------------------------------------------------------------
// Shape and reductions

inline Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().record(OpKind::reshape, {x.id()}, std::move(y),
                         [](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           auto d = in[0]->data();
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                         });
}

// (N, ...) -> (N, prod(...))
inline Var flatten(Var x) {
  const Tensor& v = x.value();
  if (v.rank() == 2) return x;
  detail::need_rank(x, 2, 4, OpKind::reshape);
  return reshape(x, Shape{v.dim(0), v.row_size()});
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(OpKind::sum, {x.id()}, Tensor::scalar(s),
                         [](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           const double gv = g[0];
                           for (double& v : in[0]->data()) v += gv;
                         });
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(OpKind::mean, {x.id()}, Tensor::scalar(s / n),
                         [n](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           const double gv = g[0] / n;
                           for (double& v : in[0]->data()) v += gv;
                         });
}

// Sums every non-leading axis: (N, ...) -> (N).
inline Var row_sum(Var x) {
  detail::need_rank(x, 1, 4, OpKind::row_sum);
  const Tensor& xv = x.value();
  const std::size_t n = xv.dim(0);
  const std::size_t rs = xv.rank() == 1 ? 1 : xv.row_size();
  Tensor y(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < rs; ++j) s += xv[r * rs + j];
    y[r] = s;
  }
  return x.tape().record(OpKind::row_sum, {x.id()}, std::move(y),
                         [n, rs](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           Tensor& gx = *in[0];
                           for (std::size_t r = 0; r < n; ++r)
                             for (std::size_t j = 0; j < rs; ++j) gx[r * rs + j] += g[r];
                         });
}

// ---------------------------------------------------------------------------
// Row-wise ops on (N, K) logits

namespace detail {

inline void check_labels(Var z, std::span<const int> labels, OpKind op) {
  need_rank(z, 2, 2, op);
  if (labels.size() != z.value().dim(0)) {
    throw ShapeError(std::string(op_name(op)) + ": " + std::to_string(labels.size()) +
                     " labels for shape " + shape_str(z.shape()));
  }
  const int k = static_cast<int>(z.value().dim(1));
  for (int l : labels) {
    if (l < 0 || l >= k) {
      throw ShapeError(std::string(op_name(op)) + ": label " + std::to_string(l) +
                       " out of range for shape " + shape_str(z.shape()));
    }
  }
}

}  // namespace detail

// y[n] = z[n, labels[n]]
inline Var pick(Var z, std::span<const int> labels) {
  detail::check_labels(z, labels, OpKind::pick);
  const Tensor& zv = z.value();
  const std::size_t n = zv.dim(0), k = zv.dim(1);
  Tensor y(Shape{n});
  for (std::size_t r = 0; r < n; ++r) y[r] = zv[r * k + labels[r]];
  std::vector<int> idx(labels.begin(), labels.end());
  return z.tape().record(OpKind::pick, {z.id()}, std::move(y),
                         [idx, k](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             (*in[0])[r * k + idx[r]] += g[r];
                         });
}

// y[n] = max_{j != labels[n]} z[n, j]; ties resolve to the lowest index.
inline Var max_excluding(Var z, std::span<const int> labels) {
  detail::check_labels(z, labels, OpKind::max_excluding);
  const Tensor& zv = z.value();
  const std::size_t n = zv.dim(0), k = zv.dim(1);
  if (k < 2) throw ShapeError("max_excluding: need at least 2 classes");
  Tensor y(Shape{n});
  std::vector<std::size_t> arg(n);
  for (std::size_t r = 0; r < n; ++r) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == labels[r]) continue;
      if (zv[r * k + j] > best) {
        best = zv[r * k + j];
        arg[r] = j;
      }
    }
    y[r] = best;
  }
  if (z.tape().tracks_branches())
    z.tape().note_branch(fnv1a(arg.data(), arg.size() * sizeof(std::size_t)));
  return z.tape().record(OpKind::max_excluding, {z.id()}, std::move(y),
                         [arg, k](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t r = 0; r < arg.size(); ++r)
                             (*in[0])[r * k + arg[r]] += g[r];
                         });
}

// Row-wise softmax over the last axis (rank 1 or 2), max-subtracted.
inline Var softmax(Var z) {
  detail::need_rank(z, 1, 2, OpKind::softmax);
  const Tensor& zv = z.value();
  const std::size_t k = zv.shape().back();
  const std::size_t n = zv.size() / std::max<std::size_t>(k, 1);
  Tensor y(zv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, zv[r * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (y[r * k + j] = std::exp(zv[r * k + j] - m));
    for (std::size_t j = 0; j < k; ++j) y[r * k + j] /= s;
  }
  const int out_id = static_cast<int>(z.tape().size());
  return z.tape().record(OpKind::softmax, {z.id()}, std::move(y),
                         [out_id, n, k](const Tape& t, const Tensor& g,
                                        std::span<Tensor* const> in) {
                           const Tensor& yv = t.value(out_id);
                           for (std::size_t r = 0; r < n; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * yv[r * k + j];
                             for (std::size_t j = 0; j < k; ++j)
                               (*in[0])[r * k + j] += yv[r * k + j] * (g[r * k + j] - dot);
                           }
                         });
}

// Per-row cross-entropy between softmax(z) and a target distribution:
// y[n] = sum_k t[n,k] * (logsumexp(z[n]) - z[n,k]). The target is constant.
inline Var cross_entropy_with_logits(Var z, const Tensor& targets) {
  detail::need_rank(z, 2, 2, OpKind::cross_entropy_with_logits);
  if (targets.shape() != z.shape()) {
    throw ShapeError("cross_entropy_with_logits: targets " + shape_str(targets.shape()) +
                     " vs logits " + shape_str(z.shape()));
  }
  const Tensor& zv = z.value();
  const std::size_t n = zv.dim(0), k = zv.dim(1);
  Tensor y(Shape{n});
  auto probs = std::make_shared<Tensor>(zv.shape());
  std::vector<double> mass(n);
  for (std::size_t r = 0; r < n; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, zv[r * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += ((*probs)[r * k + j] = std::exp(zv[r * k + j] - m));
    const double lse = m + std::log(s);
    double loss = 0.0;
    mass[r] = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[r * k + j] /= s;
      loss += targets[r * k + j] * (lse - zv[r * k + j]);
      mass[r] += targets[r * k + j];
    }
    y[r] = loss;
  }
  return z.tape().record(
      OpKind::cross_entropy_with_logits, {z.id()}, std::move(y),
      [probs, targets, mass, n, k](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j)
            (*in[0])[r * k + j] +=
                g[r] * ((*probs)[r * k + j] * mass[r] - targets[r * k + j]);
      });
}

inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t(Shape{labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw ShapeError("one_hot: label " + std::to_string(labels[r]) + " out of range");
    }
    t[r * classes + labels[r]] = 1.0;
  }
  return t;
}

inline Var cross_entropy_with_logits(Var z, std::span<const int> labels) {
  detail::check_labels(z, labels, OpKind::cross_entropy_with_logits);
  return cross_entropy_with_logits(z, one_hot(labels, z.value().dim(1)));
}

// ---------------------------------------------------------------------------
// Layers

// x (N, in), w (out, in), b (out) -> x w^T + b
inline Var dense(Var x, Var w, Var b) {
  detail::same_tape(x, w, OpKind::dense);
  detail::same_tape(x, b, OpKind::dense);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(1) ||
      bv.dim(0) != wv.dim(0)) {
    throw ShapeError("dense: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                     shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  }
  const std::size_t n = xv.dim(0), in_dim = xv.dim(1), out_dim = wv.dim(0);
  Tensor y(Shape{n, out_dim});
  {
    detail::ConstMapMat X(xv.data().data(), n, in_dim);
    detail::ConstMapMat W(wv.data().data(), out_dim, in_dim);
    detail::MapMat Y(y.data().data(), n, out_dim);
    Y.noalias() = X * W.transpose();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < out_dim; ++j) Y(r, j) += bv[j];
  }
  const int xid = x.id(), wid = w.id();
  return x.tape().record(
      OpKind::dense, {x.id(), w.id(), b.id()}, std::move(y),
      [xid, wid, n, in_dim, out_dim](const Tape& t, const Tensor& g,
                                     std::span<Tensor* const> in) {
        detail::ConstMapMat G(g.data().data(), n, out_dim);
        if (in[0]) {
          detail::ConstMapMat W(t.value(wid).data().data(), out_dim, in_dim);
          detail::MapMat GX(in[0]->data().data(), n, in_dim);
          GX.noalias() += G * W;
        }
        if (in[1]) {
          detail::ConstMapMat X(t.value(xid).data().data(), n, in_dim);
          detail::MapMat GW(in[1]->data().data(), out_dim, in_dim);
          GW.noalias() += G.transpose() * X;
        }
        if (in[2]) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) (*in[2])[j] += G(r, j);
        }
      });
}

// Stride-1 convolution. x (N, C, H, W), w (O, C, k, k), b (O). `padding`
// zero-pads each spatial border (0 = valid).
inline Var conv2d(Var x, Var w, Var b, std::size_t padding = 0) {
  detail::same_tape(x, w, OpKind::conv2d);
  detail::same_tape(x, b, OpKind::conv2d);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 4 || wv.rank() != 4 || bv.rank() != 1 || xv.dim(1) != wv.dim(1) ||
      wv.dim(2) != wv.dim(3) || bv.dim(0) != wv.dim(0) ||
      xv.dim(2) + 2 * padding < wv.dim(2) || xv.dim(3) + 2 * padding < wv.dim(3)) {
    throw ShapeError("conv2d: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                     shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t o = wv.dim(0), k = wv.dim(2);
  const std::size_t ho = h + 2 * padding - k + 1, wo = wd + 2 * padding - k + 1;
  const std::size_t hw = ho * wo, rows = c * k * k, cols = n * hw;
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  auto col = std::make_shared<detail::RowMat>(rows, cols);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* dst = col->data() + ((ci * k + ki) * k + kj) * cols;
        for (std::size_t ni = 0; ni < n; ++ni) {
          const double* src = xv.data().data() + (ni * c + ci) * h * wd;
          for (std::size_t i = 0; i < ho; ++i) {
            const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + ki) - pad;
            double* row = dst + ni * hw + i * wo;
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) {
              std::fill_n(row, wo, 0.0);
              continue;
            }
            // valid output columns: 0 <= j + kj - pad < wd
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kj) - pad;
            const std::size_t j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -off));
            const std::size_t j1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                static_cast<std::ptrdiff_t>(wd) - off, 0, static_cast<std::ptrdiff_t>(wo)));
            std::fill_n(row, j0, 0.0);
            if (j1 > j0) std::copy_n(src + si * wd + static_cast<std::ptrdiff_t>(j0) + off, j1 - j0, row + j0);
            std::fill(row + std::max(j0, j1), row + wo, 0.0);
          }
        }
      }
    }
  }
  detail::ConstMapMat W(wv.data().data(), o, rows);
  detail::RowMat out = W * (*col);
  Tensor y(Shape{n, o, ho, wo});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi) {
      double* dst = y.data().data() + (ni * o + oi) * hw;
      const double* src = out.data() + oi * cols + ni * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + bv[oi];
    }

  const int wid = w.id();
  return x.tape().record(
      OpKind::conv2d, {x.id(), w.id(), b.id()}, std::move(y),
      [col, wid, n, c, h, wd, o, k, ho, wo, hw, rows, cols, pad](
          const Tape& t, const Tensor& g, std::span<Tensor* const> in) {
        detail::RowMat gm(o, cols);
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t oi = 0; oi < o; ++oi)
            std::copy_n(g.data().data() + (ni * o + oi) * hw, hw,
                        gm.data() + oi * cols + ni * hw);
        if (in[1]) {
          detail::MapMat GW(in[1]->data().data(), o, rows);
          GW.noalias() += gm * col->transpose();
        }
        if (in[2]) {
          for (std::size_t oi = 0; oi < o; ++oi) (*in[2])[oi] += gm.row(oi).sum();
        }
        if (in[0]) {
          detail::ConstMapMat W(t.value(wid).data().data(), o, rows);
          detail::RowMat gcol = W.transpose() * gm;
          double* gx = in[0]->data().data();
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const double* src = gcol.data() + ((ci * k + ki) * k + kj) * cols;
                for (std::size_t ni = 0; ni < n; ++ni) {
                  double* dst = gx + (ni * c + ci) * h * wd;
                  for (std::size_t i = 0; i < ho; ++i) {
                    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + ki) - pad;
                    if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                    const double* row = src + ni * hw + i * wo;
                    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kj) - pad;
                    const std::size_t j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -off));
                    const std::size_t j1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                        static_cast<std::ptrdiff_t>(wd) - off, 0, static_cast<std::ptrdiff_t>(wo)));
                    double* drow = dst + si * wd + off;
                    for (std::size_t j = j0; j < j1; ++j) drow[j] += row[j];
                  }
                }
              }
        }
      });
}

// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
// Ties resolve to the first element in row-major window order.
inline Var maxpool2x2(Var x) {
  detail::need_rank(x, 4, 4, OpKind::maxpool);
  const Tensor& xv = x.value();
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  if (h < 2 || wd < 2) throw ShapeError("maxpool: input too small " + shape_str(xv.shape()));
  const std::size_t ho = h / 2, wo = wd / 2;
  Tensor y(Shape{n, c, ho, wo});
  auto arg = std::make_shared<std::vector<std::size_t>>(y.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xv.data().data() + plane * h * wd;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = (2 * i) * wd + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t p = (2 * i + di) * wd + 2 * j + dj;
            if (src[p] > src[best]) best = p;
          }
        const std::size_t out = plane * ho * wo + i * wo + j;
        y[out] = src[best];
        (*arg)[out] = plane * h * wd + best;
      }
  }
  if (x.tape().tracks_branches())
    x.tape().note_branch(fnv1a(arg->data(), arg->size() * sizeof(std::size_t)));
  return x.tape().record(OpKind::maxpool, {x.id()}, std::move(y),
                         [arg](const Tape&, const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t i = 0; i < arg->size(); ++i) (*in[0])[(*arg)[i]] += g[i];
                         });
}

}  // namespace cmtd
