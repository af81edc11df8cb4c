#pragma once

// Adversarial attacks on frozen models: FGSM, iterative gradient sign,
// JSMA (single-pixel increase), DeepFool (multi-class L-infinity), C&W L2 and
// the two-head C&W variant used against defended models.
//
// Every attack reads the model's main head (Z for plain and unlocked models,
// Z* for locked ones) and is internally batched: a chunk of examples shares
// one tape per step, while every example's trajectory depends only on its own
// row.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtd/autodiff.hpp"
#include "cmtd/batch.hpp"
#include "cmtd/data.hpp"
#include "cmtd/model.hpp"
#include "cmtd/rng.hpp"

namespace cmtd {

enum class AttackKind { fgsm, igs, jsma, deepfool_linf, cw_l2, cw_l2_combined };

inline std::string_view attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::igs: return "igs";
    case AttackKind::jsma: return "jsma";
    case AttackKind::deepfool_linf: return "deepfool_linf";
    case AttackKind::cw_l2: return "cw_l2";
    case AttackKind::cw_l2_combined: return "cw_l2_combined";
  }
  return "fgsm";
}

inline AttackKind parse_attack(std::string_view s) {
  for (auto k : {AttackKind::fgsm, AttackKind::igs, AttackKind::jsma, AttackKind::deepfool_linf,
                 AttackKind::cw_l2, AttackKind::cw_l2_combined})
    if (attack_name(k) == s) return k;
  throw ConfigError("unknown attack kind '" + std::string(s) + "'");
}

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 0.1;
  double igs_step_size = 0.01;
  int max_iterations = 0;  // 0: per-kind default (igs 10, deepfool 50, cw 1000, jsma budget)
  double kappa = 0.0;
  double jsma_theta = 1.0 / 255.0;
  double jsma_max_distortion = 0.145;
  bool targeted = false;
  int target_class = -1;  // targeted with -1: a seeded random class other than the label
  double eta1 = 0.5;
  double eta2 = 0.5;
  double learning_rate = 0.01;
  int c_search_steps = 5;
  double c_min = 1e-3;
  double c_max = 1e6;
  bool abort_early = true;
  bool stop_at_first_success = false;  // C&W: stop once any success is found
  double overshoot = 1.02;
  bool igs_ascent = false;  // add the signed step instead of subtracting it
  std::vector<int> classmap;  // robust label per class, for cw_l2_combined

  int iterations() const {
    if (max_iterations > 0) return max_iterations;
    switch (kind) {
      case AttackKind::igs: return 10;
      case AttackKind::deepfool_linf: return 50;
      case AttackKind::cw_l2:
      case AttackKind::cw_l2_combined: return 1000;
      default: return 0;
    }
  }

  void validate(std::size_t class_count = 0) const {
    auto fail = [](const std::string& m) { throw ConfigError("attack config: " + m); };
    if (!(epsilon >= 0.0)) fail("epsilon must be >= 0");
    if (!(kappa >= 0.0)) fail("kappa must be >= 0");
    if (!(eta1 >= 0.0 && eta2 >= 0.0 && eta1 + eta2 > 0.0)) fail("eta1, eta2 >= 0 with eta1+eta2 > 0");
    if (!(jsma_max_distortion > 0.0 && jsma_max_distortion <= 1.0))
      fail("jsma_max_distortion must lie in (0,1]");
    if (!(jsma_theta > 0.0)) fail("jsma_theta must be > 0");
    if (!(igs_step_size > 0.0)) fail("igs_step_size must be > 0");
    if (max_iterations < 0) fail("max_iterations must be >= 0");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (c_search_steps < 1) fail("c_search_steps must be >= 1");
    if (!(c_min > 0.0 && c_max >= c_min)) fail("need 0 < c_min <= c_max");
    if (!(overshoot >= 1.0)) fail("overshoot must be >= 1");
    if (class_count > 0 && target_class >= static_cast<int>(class_count))
      fail("target_class out of range");
    if (kind == AttackKind::cw_l2_combined) {
      if (classmap.empty()) fail("cw_l2_combined needs a classmap");
      if (class_count > 0 && classmap.size() != class_count) fail("classmap size != class count");
      for (std::size_t i = 0; i < classmap.size(); ++i) {
        if (classmap[i] < 0 || static_cast<std::size_t>(classmap[i]) >= classmap.size() ||
            classmap[i] == static_cast<int>(i))
          fail("classmap entry " + std::to_string(i) + " is invalid");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"kind", std::string(attack_name(c.kind))},
       {"epsilon", c.epsilon},
       {"igs_step_size", c.igs_step_size},
       {"max_iterations", c.max_iterations},
       {"kappa", c.kappa},
       {"jsma_theta", c.jsma_theta},
       {"jsma_max_distortion", c.jsma_max_distortion},
       {"target_mode", c.targeted ? "targeted" : "nontargeted"},
       {"target_class", c.target_class},
       {"eta1", c.eta1},
       {"eta2", c.eta2},
       {"learning_rate", c.learning_rate},
       {"c_search_steps", c.c_search_steps},
       {"c_min", c.c_min},
       {"c_max", c.c_max},
       {"abort_early", c.abort_early},
       {"stop_at_first_success", c.stop_at_first_success},
       {"overshoot", c.overshoot},
       {"igs_ascent", c.igs_ascent}};
  if (!c.classmap.empty()) j["classmap"] = c.classmap;
}

// Unknown keys are rejected so that typos do not silently fall back to
// defaults.
inline void from_json(const nlohmann::json& j, AttackConfig& c) {
  if (!j.is_object()) throw ConfigError("attack config must be a JSON object");
  static const std::set<std::string> known = {
      "kind", "epsilon", "igs_step_size", "max_iterations", "kappa", "jsma_theta",
      "jsma_max_distortion", "target_mode", "target_class", "eta1", "eta2", "learning_rate",
      "c_search_steps", "c_min", "c_max", "abort_early", "stop_at_first_success", "overshoot",
      "igs_ascent", "classmap"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("attack config: unknown field '" + k + "'");
  }
  try {
    c = AttackConfig{};
    c.kind = parse_attack(j.at("kind").get<std::string>());
    auto opt = [&](const char* k, auto& dst) {
      if (j.contains(k)) dst = j.at(k).get<std::decay_t<decltype(dst)>>();
    };
    opt("epsilon", c.epsilon);
    opt("igs_step_size", c.igs_step_size);
    opt("max_iterations", c.max_iterations);
    opt("kappa", c.kappa);
    opt("jsma_theta", c.jsma_theta);
    opt("jsma_max_distortion", c.jsma_max_distortion);
    opt("target_class", c.target_class);
    opt("eta1", c.eta1);
    opt("eta2", c.eta2);
    opt("learning_rate", c.learning_rate);
    opt("c_search_steps", c.c_search_steps);
    opt("c_min", c.c_min);
    opt("c_max", c.c_max);
    opt("abort_early", c.abort_early);
    opt("stop_at_first_success", c.stop_at_first_success);
    opt("overshoot", c.overshoot);
    opt("igs_ascent", c.igs_ascent);
    if (j.contains("target_mode")) {
      const auto m = j.at("target_mode").get<std::string>();
      if (m != "targeted" && m != "nontargeted")
        throw ConfigError("attack config: target_mode must be 'targeted' or 'nontargeted'");
      c.targeted = m == "targeted";
    }
    if (j.contains("classmap") && j.at("classmap").is_array()) {
      c.classmap = j.at("classmap").get<std::vector<int>>();
    } else if (j.contains("classmap")) {
      throw ConfigError("attack config: classmap must be an array of robust labels");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("attack config: ") + e.what());
  }
}

struct AttackResult {
  Tensor perturbed;
  bool success = false;
  int iterations = 0;
  double loss = 0.0;
  double margin = 0.0;  // see attack_margin()
  double l2 = 0.0;
  double linf = 0.0;
  int target = -1;
  bool degenerate = false;        // DeepFool: input was already misclassified
  std::size_t pixels_modified = 0;  // JSMA
  double step_norm_sum = 0.0;       // DeepFool: sum of per-iteration L-inf step norms
  double c = 0.0;                   // C&W: constant of the kept example
};

// Logit margin of the declared adversarial condition: Z_t - max_{j!=t} Z_j
// when targeted, max_{j!=y} Z_j - Z_y otherwise. Positive iff the condition
// holds (ties aside).
inline double attack_margin(std::span<const double> z, int label, int target) {
  const int ref = target >= 0 ? target : label;
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < z.size(); ++j)
    if (static_cast<int>(j) != ref) other = std::max(other, z[j]);
  return target >= 0 ? z[ref] - other : other - z[ref];
}

inline int argmax_of(std::span<const double> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

// Misclassification (nontargeted) or target hit (targeted) by argmax.
inline bool adversarial_condition(std::span<const double> z, int label, int target) {
  const int a = argmax_of(z);
  return target >= 0 ? a == target : a != label;
}

namespace detail {

inline std::span<const double> row_of(const Tensor& t, std::size_t r) {
  const std::size_t d = t.row_size();
  return t.data().subspan(r * d, d);
}

inline std::span<double> row_of(Tensor& t, std::size_t r) {
  const std::size_t d = t.row_size();
  return t.data().subspan(r * d, d);
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// One forward pass with the input as a differentiable leaf. Backward can be
// run several times on the same tape for different scalar outputs.
struct InputPass {
  Tape tape;
  std::vector<Var> params;
  Var x;
  Heads heads;

  InputPass(const Model& model, const Tensor& input) {
    params = model.bind(tape, false);
    x = tape.leaf(input, true);
    heads = model.forward(params, x);
  }

  Tensor grad(Var scalar) const { return tape.backward(scalar)[x]; }
};

inline Tensor ce_grad(const Model& model, const Tensor& x, std::span<const int> labels,
                      Tensor* logits = nullptr, std::vector<double>* loss = nullptr) {
  InputPass p(model, x);
  Var ce = cross_entropy_with_logits(p.heads.main(), labels);
  if (logits) *logits = p.heads.main().value();
  if (loss) *loss = ce.value().values();
  return p.grad(sum(ce));
}

inline std::vector<double> ce_values(const Tensor& z, std::span<const int> labels) {
  std::vector<double> out(labels.size());
  const std::size_t k = z.dim(1);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, z[r * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[r * k + j] - m);
    out[r] = m + std::log(s) - z[r * k + labels[r]];
  }
  return out;
}

// Fills distortion, margin and success from a fresh forward pass of the
// returned examples.
inline void finalize(const Model& model, const Tensor& x, std::span<const int> labels,
                     std::vector<AttackResult>& res) {
  if (res.empty()) return;
  Tensor adv(x.shape());
  for (std::size_t i = 0; i < res.size(); ++i) adv.set_row(i, res[i].perturbed);
  const Tensor z = predict_logits(model, adv);
  for (std::size_t i = 0; i < res.size(); ++i) {
    auto d = distortion(row_of(x, i), row_of(adv, i));
    res[i].l2 = d.l2;
    res[i].linf = d.linf;
    res[i].margin = attack_margin(row_of(z, i), labels[i], res[i].target);
  }
}

inline Tensor gather(const Tensor& t, const std::vector<std::size_t>& idx) {
  return t.gather_rows(idx);
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

inline std::vector<AttackResult> blank_results(const Tensor& x, std::span<const int> targets) {
  std::vector<AttackResult> res(x.dim(0));
  Shape ex(x.shape().begin() + 1, x.shape().end());
  for (std::size_t i = 0; i < res.size(); ++i) {
    res[i].perturbed = Tensor(ex, std::vector<double>(row_of(x, i).begin(), row_of(x, i).end()));
    res[i].target = targets[i];
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient-sign attacks

inline std::vector<AttackResult> fgsm_chunk(const Model& model, const Tensor& x,
                                            std::span<const int> y, std::span<const int> targets,
                                            double eps) {
  auto res = blank_results(x, targets);
  const std::size_t n = x.dim(0), d = x.row_size();
  std::vector<int> lbl(n);
  for (std::size_t i = 0; i < n; ++i) lbl[i] = targets[i] >= 0 ? targets[i] : y[i];
  const Tensor g = ce_grad(model, x, lbl);
  Tensor adv = x;
  std::vector<bool> moved(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const double dir = targets[i] >= 0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double s = sign(g[i * d + j]);
      if (s != 0.0) moved[i] = true;
      adv[i * d + j] = std::clamp(x[i * d + j] + dir * eps * s, 0.0, 1.0);
    }
    std::copy_n(adv.data().begin() + i * d, d, res[i].perturbed.data().begin());
    res[i].iterations = 1;
  }
  const Tensor z = predict_logits(model, adv);
  const auto loss = ce_values(z, y);
  for (std::size_t i = 0; i < n; ++i) {
    res[i].loss = loss[i];
    res[i].success = moved[i] && adversarial_condition(row_of(z, i), y[i], targets[i]);
  }
  return res;
}

inline std::vector<AttackResult> igs_chunk(const Model& model, const Tensor& x,
                                           std::span<const int> y, std::span<const int> targets,
                                           const AttackConfig& cfg) {
  auto res = blank_results(x, targets);
  const std::size_t n = x.dim(0), d = x.row_size();
  const double step = std::min(cfg.igs_step_size, cfg.epsilon);  // clip_eps(alpha * sign)
  Tensor cur = x;
  std::vector<std::size_t> alive(n);
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  std::vector<bool> moved(n, false);
  for (int it = 0; it < cfg.iterations() && !alive.empty(); ++it) {
    const Tensor xa = gather(cur, alive);
    std::vector<int> lbl;
    for (std::size_t i : alive) lbl.push_back(targets[i] >= 0 ? targets[i] : y[i]);
    Tensor z;
    const Tensor g = ce_grad(model, xa, lbl, &z);
    std::vector<std::size_t> next;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      const std::size_t i = alive[a];
      if (it > 0 && adversarial_condition(row_of(z, a), y[i], targets[i])) continue;
      // Targeted runs descend the target loss; nontargeted runs follow the
      // update literally (subtract) unless igs_ascent is set.
      const double dir = targets[i] >= 0 ? -1.0 : (cfg.igs_ascent ? 1.0 : -1.0);
      bool any = false;
      for (std::size_t j = 0; j < d; ++j) {
        const double s = sign(g[a * d + j]);
        any = any || s != 0.0;
        const double v = cur[i * d + j] + dir * step * s;
        const double o = x[i * d + j];
        cur[i * d + j] = std::clamp(std::clamp(v, o - cfg.epsilon, o + cfg.epsilon), 0.0, 1.0);
      }
      moved[i] = moved[i] || any;
      res[i].iterations = it + 1;
      if (any) next.push_back(i);
    }
    alive = std::move(next);
  }
  const Tensor z = predict_logits(model, cur);
  const auto loss = ce_values(z, y);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(cur.data().begin() + i * d, d, res[i].perturbed.data().begin());
    res[i].loss = loss[i];
    res[i].success = moved[i] && adversarial_condition(row_of(z, i), y[i], targets[i]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// JSMA, increase variant, one pixel per iteration. Targeted saliency is
// a_p * |b_p| over pixels with a_p > 0 and b_p < 0, where a is the gradient of
// the target logit and b the gradient of the sum of the other logits.
// Nontargeted runs use the true class with the signs flipped: |a_p| * b_p over
// a_p < 0 and b_p > 0.

inline std::size_t jsma_budget(double max_distortion, std::size_t pixels) {
  return static_cast<std::size_t>(std::ceil(max_distortion * static_cast<double>(pixels) - 1e-9));
}

inline std::vector<AttackResult> jsma_chunk(const Model& model, const Tensor& x,
                                            std::span<const int> y, std::span<const int> targets,
                                            const AttackConfig& cfg) {
  auto res = blank_results(x, targets);
  const std::size_t n = x.dim(0), d = x.row_size();
  const std::size_t budget = jsma_budget(cfg.jsma_max_distortion, d);
  const int cap = cfg.max_iterations > 0
                      ? cfg.max_iterations
                      : static_cast<int>(budget * static_cast<std::size_t>(
                                                      std::ceil(1.0 / cfg.jsma_theta - 1e-9)));
  Tensor cur = x;
  std::vector<std::set<std::size_t>> modified(n);
  std::vector<std::size_t> alive(n);
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  for (int it = 0; !alive.empty(); ++it) {
    const Tensor xa = gather(cur, alive);
    InputPass p(model, xa);
    Var z = p.heads.main();
    std::vector<int> ref;
    for (std::size_t i : alive) ref.push_back(targets[i] >= 0 ? targets[i] : y[i]);
    // Finished rows still sit in the pass; their gradients are ignored.
    std::vector<std::size_t> next, work;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      const std::size_t i = alive[a];
      if (adversarial_condition(row_of(z.value(), a), y[i], targets[i]) || it >= cap) continue;
      work.push_back(a);
    }
    if (work.empty()) break;
    const Tensor ga = p.grad(sum(pick(z, ref)));
    const Tensor gall = p.grad(sum(row_sum(z)));
    for (std::size_t a : work) {
      const std::size_t i = alive[a];
      const bool targeted = targets[i] >= 0;
      const bool full = modified[i].size() >= budget;
      double best = 0.0;
      std::size_t pick_px = d;
      for (std::size_t j = 0; j < d; ++j) {
        if (cur[i * d + j] >= 1.0) continue;
        if (full && !modified[i].count(j)) continue;
        const double al = ga[a * d + j];
        const double be = gall[a * d + j] - al;
        double s = 0.0;
        if (targeted && al > 0.0 && be < 0.0) s = al * -be;
        if (!targeted && al < 0.0 && be > 0.0) s = -al * be;
        if (s > best) {
          best = s;
          pick_px = j;
        }
      }
      if (pick_px == d) continue;  // no admissible pixel left
      cur[i * d + pick_px] = std::min(1.0, cur[i * d + pick_px] + cfg.jsma_theta);
      modified[i].insert(pick_px);
      res[i].iterations = it + 1;
      next.push_back(i);
    }
    alive = std::move(next);
  }
  const Tensor z = predict_logits(model, cur);
  const auto loss = ce_values(z, y);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(cur.data().begin() + i * d, d, res[i].perturbed.data().begin());
    res[i].pixels_modified = modified[i].size();
    res[i].loss = loss[i];
    res[i].success = adversarial_condition(row_of(z, i), y[i], targets[i]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// DeepFool, multi-class L-infinity form. Per iteration: among k != y0 pick
// l = argmin |f_k| / ||w_k||_1 with f_k = Z_k - Z_y0 and w_k its input
// gradient, step r = (|f_l| + 1e-4) / ||w_l||_1 * sign(w_l), and set
// x = clip(x0 + overshoot * sum(r), 0, 1).

inline std::vector<AttackResult> deepfool_chunk(const Model& model, const Tensor& x,
                                                std::span<const int> y,
                                                std::span<const int> targets,
                                                const AttackConfig& cfg) {
  auto res = blank_results(x, targets);
  const std::size_t n = x.dim(0), d = x.row_size(), k = model.class_count();
  Tensor cur = x;
  Tensor rtot(x.shape());
  std::vector<std::size_t> alive;
  {
    const Tensor z0 = predict_logits(model, x);
    for (std::size_t i = 0; i < n; ++i) {
      if (argmax_of(row_of(z0, i)) != y[i]) {
        res[i].degenerate = true;
      } else {
        alive.push_back(i);
      }
    }
  }
  for (int it = 0; it < cfg.iterations() && !alive.empty(); ++it) {
    const Tensor xa = gather(cur, alive);
    InputPass p(model, xa);
    Var z = p.heads.main();
    const Tensor& zv = z.value();
    std::vector<std::size_t> work;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      if (it == 0 || argmax_of(row_of(zv, a)) == y[alive[a]]) work.push_back(a);
    }
    if (work.empty()) break;
    std::vector<Tensor> grads(k);
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<int> cls(alive.size(), static_cast<int>(c));
      grads[c] = p.grad(sum(pick(z, cls)));
    }
    std::vector<std::size_t> next;
    for (std::size_t a : work) {
      const std::size_t i = alive[a];
      const std::size_t y0 = static_cast<std::size_t>(y[i]);
      double best = std::numeric_limits<double>::infinity();
      std::size_t l = k;
      double bf = 0.0, bn = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        if (c == y0) continue;
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j)
          norm += std::abs(grads[c][a * d + j] - grads[y0][a * d + j]);
        if (norm <= 0.0) continue;
        const double f = zv[a * k + c] - zv[a * k + y0];
        if (std::abs(f) / norm < best) {
          best = std::abs(f) / norm;
          l = c;
          bf = f;
          bn = norm;
        }
      }
      if (l == k) continue;  // flat logits: no direction
      const double mag = (std::abs(bf) + 1e-4) / bn;
      for (std::size_t j = 0; j < d; ++j) {
        rtot[i * d + j] += mag * sign(grads[l][a * d + j] - grads[y0][a * d + j]);
        cur[i * d + j] = std::clamp(x[i * d + j] + cfg.overshoot * rtot[i * d + j], 0.0, 1.0);
      }
      res[i].step_norm_sum += mag;
      res[i].iterations = it + 1;
      next.push_back(i);
    }
    alive = std::move(next);
  }
  const Tensor z = predict_logits(model, cur);
  const auto loss = ce_values(z, y);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(cur.data().begin() + i * d, d, res[i].perturbed.data().begin());
    res[i].loss = loss[i];
    res[i].success = res[i].degenerate || adversarial_condition(row_of(z, i), y[i], targets[i]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// C&W L2 with the tanh change of variables x' = (tanh(w) + 1) / 2, Adam on w
// and a geometric bisection of the constant c over [c_min, c_max].
//
// Single head, per example:  ||x' - x||^2 + c * f(x')
//   targeted     f = max(max_{j!=t} Z_j - Z_t + kappa, 0)
//   nontargeted  f = max(Z_y - max_{j!=y} Z_j + kappa, 0)
// Two heads (combined):  ||x' - x||^2 + c * (eta1 * f(main, t) + eta2 * f(Z', t'))
// where, when nontargeted, t is the current best non-true class of the main
// head and t' = classmap[t]. A head only enters the success condition when its
// weight is positive.

struct CwSuccess {
  bool ok = false;
  double margin = -std::numeric_limits<double>::infinity();
};

inline CwSuccess cw_check(std::span<const double> zm, const double* zp, std::size_t k, int y,
                          int t, const AttackConfig& cfg, bool combined) {
  CwSuccess s;
  const bool targeted = t >= 0;
  const double mm = attack_margin(zm, y, t);
  const int am = argmax_of(zm);
  bool ok = targeted ? am == t : am != y;
  double margin = mm;
  bool use_main = !combined || cfg.eta1 > 0.0;
  if (!use_main) {
    ok = true;
    margin = std::numeric_limits<double>::infinity();
  } else {
    ok = ok && mm >= cfg.kappa;
  }
  if (combined && cfg.eta2 > 0.0) {
    const int tc = targeted ? t : am;
    const int tp = cfg.classmap[static_cast<std::size_t>(tc)];
    std::span<const double> zpr(zp, k);
    const double mp = attack_margin(zpr, -1, tp);
    ok = ok && argmax_of(zpr) == tp && mp >= cfg.kappa && (targeted || am != y);
    margin = std::min(margin, mp);
  }
  s.ok = ok;
  s.margin = margin;
  return s;
}

inline std::vector<AttackResult> cw_chunk(const Model& model, const Tensor& x,
                                          std::span<const int> y, std::span<const int> targets,
                                          const AttackConfig& cfg, bool combined) {
  auto res = blank_results(x, targets);
  const std::size_t n = x.dim(0), d = x.row_size(), k = model.class_count();
  if (combined && !model.has_head(Head::z_prime)) {
    throw ConfigError("cw_l2_combined needs a defended model with a Z' head");
  }
  Tensor w0(x.shape());
  for (std::size_t j = 0; j < x.size(); ++j) w0[j] = std::atanh((2.0 * x[j] - 1.0) * 0.999999);

  std::vector<double> lo(n, cfg.c_min), hi(n, cfg.c_max), c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = std::sqrt(lo[i] * hi[i]);
  std::vector<double> best_l2(n, std::numeric_limits<double>::infinity());
  std::vector<double> best_margin(n, -std::numeric_limits<double>::infinity());
  std::vector<bool> found(n, false);
  Tensor best_x = x;
  const int steps = cfg.iterations();
  const int check_every = std::max(1, steps / 10);
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

  for (int s = 0; s < cfg.c_search_steps; ++s) {
    std::vector<std::size_t> alive;
    for (std::size_t i = 0; i < n; ++i)
      if (!(cfg.stop_at_first_success && found[i])) alive.push_back(i);
    if (alive.empty()) break;
    Tensor w = w0, m(x.shape()), v(x.shape());
    std::vector<double> prev(n, std::numeric_limits<double>::infinity());
    std::vector<bool> hit(n, false);
    for (int it = 0; it < steps && !alive.empty(); ++it) {
      const Tensor wa = gather(w, alive);
      const Tensor xa = gather(x, alive);
      const std::size_t na = alive.size();
      Tape tape;
      auto params = model.bind(tape, false);
      Var wv = tape.leaf(wa, true);
      Var xn = scalar_mul(add_scalar(tanh(wv), 1.0), 0.5);
      Var delta = sub(xn, tape.constant(xa));
      Var l2 = row_sum(mul(delta, delta));
      Heads h = model.forward(params, xn);
      Var zm = h.main();
      const Tensor& zmv = zm.value();
      std::vector<int> ya = gather(std::vector<int>(y.begin(), y.end()), alive);
      std::vector<int> ta = gather(std::vector<int>(targets.begin(), targets.end()), alive);
      Var f;
      {
        // Main-head term.
        std::vector<int> ref(na);
        for (std::size_t a = 0; a < na; ++a) ref[a] = ta[a] >= 0 ? ta[a] : ya[a];
        Var real = pick(zm, ref), other = max_excluding(zm, ref);
        std::vector<double> sgn(na);
        for (std::size_t a = 0; a < na; ++a) sgn[a] = ta[a] >= 0 ? 1.0 : -1.0;
        // targeted: other - real; nontargeted: real - other
        Var diff = mul(sub(other, real), tape.constant(Tensor(Shape{na}, sgn)));
        Var fm = relu(add_scalar(diff, cfg.kappa));
        f = combined ? scalar_mul(fm, cfg.eta1) : fm;
      }
      if (combined) {
        Var zp = h.z_prime;
        std::vector<int> tp(na);
        for (std::size_t a = 0; a < na; ++a) {
          int tc = ta[a];
          if (tc < 0) {
            // best non-true class of the main head at this iterate
            double bestv = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
              if (static_cast<int>(j) == ya[a]) continue;
              if (zmv[a * k + j] > bestv) {
                bestv = zmv[a * k + j];
                tc = static_cast<int>(j);
              }
            }
          }
          tp[a] = cfg.classmap[static_cast<std::size_t>(tc)];
        }
        Var fp = relu(add_scalar(sub(max_excluding(zp, tp), pick(zp, tp)), cfg.kappa));
        f = add(f, scalar_mul(fp, cfg.eta2));
      }
      std::vector<double> ca(na);
      for (std::size_t a = 0; a < na; ++a) ca[a] = c[alive[a]];
      Var per = add(l2, mul(f, tape.constant(Tensor(Shape{na}, ca))));
      Var total = sum(per);

      // Record successes at the current iterate.
      const Tensor& xnv = xn.value();
      const Tensor& l2v = l2.value();
      const Tensor& perv = per.value();
      const Tensor* zpv = combined ? &h.z_prime.value() : nullptr;
      std::vector<std::size_t> next;
      for (std::size_t a = 0; a < na; ++a) {
        const std::size_t i = alive[a];
        CwSuccess cs = cw_check(row_of(zmv, a), zpv ? zpv->data().data() + a * k : nullptr, k,
                                ya[a], ta[a], cfg, combined);
        best_margin[i] = std::max(best_margin[i], cs.margin);
        if (cs.ok) {
          hit[i] = true;
          if (l2v[a] < best_l2[i]) {
            best_l2[i] = l2v[a];
            found[i] = true;
            std::copy_n(xnv.data().begin() + a * d, d, best_x.data().begin() + i * d);
            res[i].c = c[i];
            res[i].loss = perv[a];
          }
        }
        bool keep = true;
        if (cfg.stop_at_first_success && found[i]) keep = false;
        if (cfg.abort_early && it > 0 && it % check_every == 0) {
          if (perv[a] > prev[i] * 0.9999) keep = false;
          prev[i] = perv[a];
        }
        if (it == 0) prev[i] = perv[a];
        if (keep) next.push_back(a);
        res[i].iterations += 1;
      }
      const Tensor g = tape.backward(total)[wv];
      // Adam step on the rows that continue.
      const double bc1 = 1.0 - std::pow(b1, it + 1), bc2 = 1.0 - std::pow(b2, it + 1);
      std::vector<std::size_t> next_idx;
      for (std::size_t a : next) {
        const std::size_t i = alive[a];
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t q = i * d + j;
          const double gj = g[a * d + j];
          m[q] = b1 * m[q] + (1 - b1) * gj;
          v[q] = b2 * v[q] + (1 - b2) * gj * gj;
          w[q] -= cfg.learning_rate * (m[q] / bc1) / (std::sqrt(v[q] / bc2) + adam_eps);
        }
        next_idx.push_back(i);
      }
      alive = std::move(next_idx);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (hit[i]) {
        hi[i] = std::min(hi[i], c[i]);
      } else {
        lo[i] = std::max(lo[i], c[i]);
      }
      c[i] = std::sqrt(lo[i] * hi[i]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (found[i]) std::copy_n(best_x.data().begin() + i * d, d, res[i].perturbed.data().begin());
    res[i].margin = best_margin[i];
  }
  // Fresh forward pass: success is re-derived from the returned examples.
  Tensor adv(x.shape());
  for (std::size_t i = 0; i < n; ++i) adv.set_row(i, res[i].perturbed);
  const HeadValues hv = forward_heads(model, adv);
  for (std::size_t i = 0; i < n; ++i) {
    if (!found[i]) continue;
    const double* zp = combined ? hv.z_prime->data().data() + i * k : nullptr;
    CwSuccess cs = cw_check(row_of(hv.main(), i), zp, k, y[i], targets[i], cfg, combined);
    res[i].success = cs.ok;
    res[i].margin = cs.margin;
  }
  return res;
}

inline std::vector<AttackResult> run_chunk(const Model& model, const Tensor& x,
                                           std::span<const int> y, std::span<const int> targets,
                                           const AttackConfig& cfg) {
  std::vector<AttackResult> res;
  switch (cfg.kind) {
    case AttackKind::fgsm: res = fgsm_chunk(model, x, y, targets, cfg.epsilon); break;
    case AttackKind::igs: res = igs_chunk(model, x, y, targets, cfg); break;
    case AttackKind::jsma: res = jsma_chunk(model, x, y, targets, cfg); break;
    case AttackKind::deepfool_linf: res = deepfool_chunk(model, x, y, targets, cfg); break;
    case AttackKind::cw_l2: res = cw_chunk(model, x, y, targets, cfg, false); break;
    case AttackKind::cw_l2_combined: res = cw_chunk(model, x, y, targets, cfg, true); break;
  }
  // Distortion from the returned pair; C&W keeps its own margin (it may span
  // two heads).
  for (std::size_t i = 0; i < res.size(); ++i) {
    auto dd = distortion(row_of(x, i), res[i].perturbed.data());
    res[i].l2 = dd.l2;
    res[i].linf = dd.linf;
  }
  if (cfg.kind != AttackKind::cw_l2 && cfg.kind != AttackKind::cw_l2_combined) {
    finalize(model, x, y, res);
  }
  return res;
}

}  // namespace detail

// Runs one attack over a batch (N, ...). `targets[i]` is the target class or
// -1 for a nontargeted run; an empty span means all nontargeted.
inline std::vector<AttackResult> attack_batch(const Model& model, const Tensor& x,
                                              std::span<const int> y, const AttackConfig& cfg,
                                              std::span<const int> targets = {}) {
  cfg.validate(model.class_count());
  model.check_input(x.shape());
  if (y.size() != x.dim(0)) throw ShapeError("attack: label count does not match batch");
  std::vector<int> t(targets.begin(), targets.end());
  if (t.empty()) t.assign(y.size(), -1);
  if (t.size() != y.size()) throw ShapeError("attack: target count does not match batch");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] >= 0 && t[i] == y[i]) {
      throw ConfigError("attack: target class equals the true class for example " +
                        std::to_string(i));
    }
  }
  if (x.dim(0) == 0) return {};
  return detail::run_chunk(model, x, y, t, cfg);
}

inline AttackResult run_attack(const Model& model, const Tensor& x, int y, const AttackConfig& cfg,
                               int target = -1) {
  const Tensor xb = x.reshaped(model.batch_shape(1));
  const int yy[1] = {y};
  const int tt[1] = {target};
  auto r = attack_batch(model, xb, yy, cfg, tt);
  r[0].perturbed = r[0].perturbed.reshaped(x.shape());
  return r[0];
}

inline AttackResult fgsm(const Model& model, const Tensor& x, int y, double epsilon) {
  AttackConfig c;
  c.kind = AttackKind::fgsm;
  c.epsilon = epsilon;
  return run_attack(model, x, y, c);
}

inline AttackResult igs(const Model& model, const Tensor& x, int y, double epsilon,
                        double step_size, int max_iterations, bool ascent = false) {
  AttackConfig c;
  c.kind = AttackKind::igs;
  c.epsilon = epsilon;
  c.igs_step_size = step_size;
  c.max_iterations = max_iterations;
  c.igs_ascent = ascent;
  return run_attack(model, x, y, c);
}

inline AttackResult jsma(const Model& model, const Tensor& x, int y, int target, double theta,
                         double max_distortion) {
  AttackConfig c;
  c.kind = AttackKind::jsma;
  c.jsma_theta = theta;
  c.jsma_max_distortion = max_distortion;
  c.targeted = target >= 0;
  return run_attack(model, x, y, c, target);
}

inline AttackResult deepfool_linf(const Model& model, const Tensor& x, int y, int max_iterations,
                                  double overshoot) {
  AttackConfig c;
  c.kind = AttackKind::deepfool_linf;
  c.max_iterations = max_iterations;
  c.overshoot = overshoot;
  return run_attack(model, x, y, c);
}

// `solver` supplies learning rate, steps and c-search settings.
inline AttackResult cw_l2(const Model& model, const Tensor& x, int y, int target, double kappa,
                          AttackConfig solver = {}) {
  solver.kind = AttackKind::cw_l2;
  solver.kappa = kappa;
  solver.targeted = target >= 0;
  return run_attack(model, x, y, solver, target);
}

// Targeted two-head attack on the pair (t, t'); `solver.classmap` may be left
// empty, in which case a map sending t to t' is synthesised.
inline AttackResult cw_l2_combined(const Model& model, const Tensor& x, int y, int t, int t_prime,
                                   double kappa, double eta1, double eta2,
                                   AttackConfig solver = {}) {
  solver.kind = AttackKind::cw_l2_combined;
  solver.kappa = kappa;
  solver.eta1 = eta1;
  solver.eta2 = eta2;
  solver.targeted = true;
  if (solver.classmap.empty()) {
    const std::size_t k = model.class_count();
    solver.classmap.resize(k);
    for (std::size_t i = 0; i < k; ++i) solver.classmap[i] = static_cast<int>((i + 1) % k);
    if (t_prime == t) throw ConfigError("cw_l2_combined: t' must differ from t");
    solver.classmap[static_cast<std::size_t>(t)] = t_prime;
  } else if (solver.classmap.at(static_cast<std::size_t>(t)) != t_prime) {
    throw ConfigError("cw_l2_combined: (t, t') is not a pair of the supplied classmap");
  }
  return run_attack(model, x, y, solver, t);
}

// Worker count: CMTD_THREADS when set to a positive integer, otherwise the
// hardware concurrency.
inline unsigned worker_count() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CMTD_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return hw;
}

inline constexpr std::size_t kAttackChunk = 32;

// Attacks every example of `data`. Targeted configs with target_class = -1
// draw each target from SplitMix64(seed) forked per example, excluding the
// true label. Examples are processed in fixed chunks on up to worker_count()
// threads and merged in input order, so the result does not depend on the
// thread count. A chunk that throws is recorded as failed, not propagated.
inline AdversarialBatch batch_attack(const Model& model, const Dataset& data,
                                     const AttackConfig& cfg, std::uint64_t seed) {
  cfg.validate(model.class_count());
  AdversarialBatch out;
  out.attack = std::string(attack_name(cfg.kind));
  out.config = cfg;
  out.config["seed"] = seed;
  const std::size_t n = data.size();
  out.originals = data.images;
  out.perturbed = data.images;
  out.labels = data.labels;
  out.targets.assign(n, -1);
  out.success.assign(n, false);
  out.l2.assign(n, 0.0);
  out.linf.assign(n, 0.0);
  out.iterations.assign(n, 0);
  out.margin.assign(n, 0.0);
  if (n == 0) return out;
  model.check_input(data.images.shape());

  const std::size_t k = model.class_count();
  for (std::size_t i = 0; i < n; ++i) {
    if (!cfg.targeted) continue;
    if (cfg.target_class >= 0) {
      out.targets[i] = cfg.target_class;
    } else {
      SplitMix64 rng(seed ^ (0x9FB21C651E98DF25ULL * (i + 1)));
      int t = static_cast<int>(rng.below(k - 1));
      if (t >= data.labels[i]) ++t;
      out.targets[i] = t;
    }
  }

  const std::size_t chunks = (n + kAttackChunk - 1) / kAttackChunk;
  std::vector<std::vector<AttackResult>> results(chunks);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t ci; (ci = next.fetch_add(1)) < chunks;) {
      const std::size_t b = ci * kAttackChunk, e = std::min(n, b + kAttackChunk);
      const Tensor x = data.images.rows(b, e);
      std::vector<int> y(data.labels.begin() + b, data.labels.begin() + e);
      std::vector<int> t(out.targets.begin() + b, out.targets.begin() + e);
      // An example whose fixed target equals its label cannot be attacked.
      std::vector<std::size_t> ok;
      for (std::size_t i = 0; i < y.size(); ++i)
        if (t[i] < 0 || t[i] != y[i]) ok.push_back(i);
      std::vector<AttackResult> r(y.size());
      try {
        auto sub = detail::run_chunk(model, detail::gather(x, ok), detail::gather(y, ok),
                                     detail::gather(t, ok), cfg);
        for (std::size_t a = 0; a < ok.size(); ++a) r[ok[a]] = std::move(sub[a]);
      } catch (const std::exception&) {
        r.assign(y.size(), AttackResult{});
      }
      results[ci] = std::move(r);
    }
  };
  const unsigned workers = std::min<std::size_t>(worker_count(), chunks);
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }

  const std::size_t d = data.images.row_size();
  for (std::size_t ci = 0; ci < chunks; ++ci) {
    for (std::size_t a = 0; a < results[ci].size(); ++a) {
      const std::size_t i = ci * kAttackChunk + a;
      const AttackResult& r = results[ci][a];
      if (r.perturbed.size() == d) {
        std::copy_n(r.perturbed.data().begin(), d, out.perturbed.data().begin() + i * d);
      }
      out.success[i] = r.success;
      out.l2[i] = r.l2;
      out.linf[i] = r.linf;
      out.iterations[i] = r.iterations;
      out.margin[i] = r.margin;
    }
  }
  return out;
}

}  // namespace cmtd
