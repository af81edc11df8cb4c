#pragma once

// Input gradients of model losses and the central finite-difference oracle
// used to validate them.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cmtd/autodiff.hpp"
#include "cmtd/model.hpp"
#include "cmtd/rng.hpp"

namespace cmtd {

// A scalar loss over one head, summed across the batch.
struct LossSpec {
  enum class Kind {
    cross_entropy,  // sum_n CE(head[n], labels[n])
    logit,          // sum_n head[n, logit_index]
  };
  Kind kind = Kind::cross_entropy;
  Head head = Head::main;
  std::vector<int> labels;
  std::size_t logit_index = 0;

  static LossSpec cross_entropy(std::vector<int> labels, Head head = Head::main) {
    return {Kind::cross_entropy, head, std::move(labels), 0};
  }
  static LossSpec logit(std::size_t index, Head head = Head::main) {
    return {Kind::logit, head, {}, index};
  }
};

inline Var build_loss(const Heads& heads, const LossSpec& spec) {
  Var z = heads.get(spec.head);
  if (spec.kind == LossSpec::Kind::cross_entropy) {
    return sum(cross_entropy_with_logits(z, spec.labels));
  }
  std::vector<int> idx(z.value().dim(0), static_cast<int>(spec.logit_index));
  return sum(pick(z, idx));
}

namespace detail {

// Accepts a single example (input_shape) or a batch (N, input_shape...).
inline Tensor as_batch(const Model& model, const Tensor& x) {
  if (x.rank() == model.spec().input_shape.size()) return x.reshaped(model.batch_shape(1));
  model.check_input(x.shape());
  return x;
}

}  // namespace detail

// d loss / d x with the model weights held constant. Returns a tensor shaped
// like `x`.
inline Tensor grad_wrt_input(const Model& model, const Tensor& x, const LossSpec& spec,
                             const ForwardOptions& opt = {}) {
  if (!model.has_head(spec.head)) {
    throw ConfigError("loss references head '" + std::string(head_name(spec.head)) +
                      "' which the model lacks");
  }
  Tape tape;
  auto params = model.bind(tape, false);
  const Tensor xb = detail::as_batch(model, x);
  Var xv = tape.leaf(xb, true);
  Var loss = build_loss(model.forward(params, xv, opt), spec);
  return tape.backward(loss)[xv].reshaped(x.shape());
}

struct FdEntry {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool excluded = false;  // the +/- step straddles a relu/maxpool/clip branch change
};

struct FdReport {
  std::vector<FdEntry> entries;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  bool passed = true;
};

// relative error = |a - n| / max(|a|, |n|, 1e-6)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Builds a scalar from the leaf standing for the checked tensor.
using ScalarFn = std::function<Var(Tape&, Var)>;

// Central differences on up to `samples` coordinates of `point` (all of them
// when samples == 0 or exceeds the size), drawn with SplitMix64(seed).
// Coordinates whose +/- evaluations take a different piecewise branch than the
// base point are reported as excluded rather than failed.
inline FdReport finite_difference_check(const ScalarFn& fn, const Tensor& point, double step,
                                        double tolerance, std::size_t samples = 0,
                                        std::uint64_t seed = 0) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be > 0");
  Tensor analytic;
  std::uint64_t base_sig;
  {
    Tape tape;
    tape.track_branches(true);
    Var x = tape.leaf(point, true);
    Var y = fn(tape, x);
    base_sig = tape.branch_signature();
    analytic = tape.backward(y)[x];
  }
  auto eval = [&](const Tensor& p, std::uint64_t& sig) {
    Tape tape;
    tape.track_branches(true);
    Var y = fn(tape, tape.leaf(p, false));
    sig = tape.branch_signature();
    return y.value().item();
  };

  std::vector<std::size_t> coords;
  if (samples == 0 || samples >= point.size()) {
    coords.resize(point.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  } else {
    SplitMix64 rng(seed);
    auto perm = rng.permutation(point.size());
    coords.assign(perm.begin(), perm.begin() + samples);
    std::sort(coords.begin(), coords.end());
  }

  FdReport rep;
  Tensor p = point;
  for (std::size_t i : coords) {
    const double orig = p[i];
    std::uint64_t sp, sm;
    p[i] = orig + step;
    const double fp = eval(p, sp);
    p[i] = orig - step;
    const double fm = eval(p, sm);
    p[i] = orig;
    FdEntry e;
    e.index = i;
    e.analytic = analytic[i];
    e.numeric = (fp - fm) / (2.0 * step);
    e.rel_error = relative_error(e.analytic, e.numeric);
    e.excluded = sp != base_sig || sm != base_sig;
    if (e.excluded) {
      ++rep.excluded;
    } else {
      ++rep.checked;
      rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
      if (e.rel_error >= tolerance) rep.passed = false;
    }
    rep.entries.push_back(e);
  }
  return rep;
}

// Input-gradient check of a model loss.
inline FdReport finite_difference_check(const Model& model, const Tensor& x, const LossSpec& spec,
                                        double step, double tolerance, std::size_t samples = 0,
                                        std::uint64_t seed = 0,
                                        const ForwardOptions& opt = {}) {
  if (!model.has_head(spec.head)) {
    throw ConfigError("loss references head '" + std::string(head_name(spec.head)) +
                      "' which the model lacks");
  }
  const Tensor xb = detail::as_batch(model, x);
  ScalarFn fn = [&](Tape& tape, Var xv) {
    auto params = model.bind(tape, false);
    return build_loss(model.forward(params, xv, opt), spec);
  };
  return finite_difference_check(fn, xb, step, tolerance, samples, seed);
}

}  // namespace cmtd
