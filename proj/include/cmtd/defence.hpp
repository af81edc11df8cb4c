#pragma once

// Robust-label defence: vulnerability estimation, Classmap encoding, the
// multi-task training objective and the pair-matching detector.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtd/attacks.hpp"
#include "cmtd/container.hpp"
#include "cmtd/train.hpp"
#include "cmtd/weights.hpp"

namespace cmtd {

// P[i] is the mean softmax output over adversarial examples that started in
// class i; counts[i] is how many there were.
struct VulnerabilityMatrix {
  Tensor p;
  std::vector<std::size_t> counts;

  std::size_t classes() const { return counts.size(); }
  double at(std::size_t i, std::size_t j) const { return p[i * classes() + j]; }
};

inline VulnerabilityMatrix estimate_vulnerability(const Model& model, const Tensor& adversarial,
                                                  std::span<const int> labels) {
  const std::size_t k = model.class_count();
  if (adversarial.rank() == 0 || adversarial.dim(0) != labels.size()) {
    throw ShapeError("estimate_vulnerability: label count does not match examples");
  }
  VulnerabilityMatrix v{Tensor(Shape{k, k}), std::vector<std::size_t>(k, 0)};
  if (!labels.empty()) {
    const Tensor z = predict_logits(model, adversarial);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const auto c = static_cast<std::size_t>(labels[r]);
      if (c >= k) throw ConfigError("estimate_vulnerability: label out of range");
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) m = std::max(m, z[r * k + j]);
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(z[r * k + j] - m);
      for (std::size_t j = 0; j < k; ++j) v.p[c * k + j] += std::exp(z[r * k + j] - m) / s;
      ++v.counts[c];
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (v.counts[c] == 0) {
      throw ConfigError("estimate_vulnerability: class " + std::to_string(c) +
                        " has no adversarial examples");
    }
    for (std::size_t j = 0; j < k; ++j) v.p[c * k + j] /= static_cast<double>(v.counts[c]);
  }
  return v;
}

inline VulnerabilityMatrix estimate_vulnerability(const Model& model,
                                                  const AdversarialBatch& batch) {
  return estimate_vulnerability(model, batch.perturbed, batch.labels);
}

struct Classmap {
  std::vector<int> robust;  // robust[i] = l_robust(i)
  std::string source_attack;
  double epsilon = 0.0;
  std::string model_hash;
  std::vector<std::size_t> examples_per_class;

  std::size_t classes() const { return robust.size(); }

  bool is_pair(int label, int aux) const {
    return label >= 0 && static_cast<std::size_t>(label) < robust.size() &&
           robust[static_cast<std::size_t>(label)] == aux;
  }

  void validate() const {
    if (robust.empty()) throw ConfigError("classmap: no classes");
    for (std::size_t i = 0; i < robust.size(); ++i) {
      if (robust[i] < 0 || static_cast<std::size_t>(robust[i]) >= robust.size()) {
        throw ConfigError("classmap: robust label of class " + std::to_string(i) +
                          " out of range");
      }
      if (robust[i] == static_cast<int>(i)) {
        throw ConfigError("classmap: class " + std::to_string(i) + " maps to itself");
      }
    }
  }
};

// l_robust(i) = argmin_{j != i} P[i][j], ties to the lowest j.
inline Classmap encode_classmap(const VulnerabilityMatrix& v) {
  const std::size_t k = v.classes();
  if (k < 2) throw ConfigError("encode_classmap: need at least two classes");
  Classmap m;
  m.robust.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != i && v.at(i, j) < v.at(i, best)) best = j;
    }
    m.robust[i] = static_cast<int>(best);
  }
  m.examples_per_class = v.counts;
  return m;
}

inline void to_json(nlohmann::json& j, const Classmap& m) {
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t i = 0; i < m.robust.size(); ++i) pairs.push_back({static_cast<int>(i), m.robust[i]});
  j = {{"classes", m.robust.size()},
       {"pairs", pairs},
       {"source_attack", m.source_attack},
       {"epsilon", m.epsilon},
       {"model_hash", m.model_hash},
       {"examples_per_class", m.examples_per_class}};
}

inline void from_json(const nlohmann::json& j, Classmap& m) {
  try {
    const std::size_t k = j.at("classes").get<std::size_t>();
    m.robust.assign(k, -1);
    for (const auto& p : j.at("pairs")) {
      const auto i = p.at(0).get<std::size_t>();
      if (i >= k) throw ConfigError("classmap: pair for class " + std::to_string(i) + " out of range");
      if (m.robust[i] != -1) throw ConfigError("classmap: duplicate pair for class " + std::to_string(i));
      m.robust[i] = p.at(1).get<int>();
    }
    for (std::size_t i = 0; i < k; ++i) {
      if (m.robust[i] == -1) throw ConfigError("classmap: no pair for class " + std::to_string(i));
    }
    m.source_attack = j.value("source_attack", std::string());
    m.epsilon = j.value("epsilon", 0.0);
    m.model_hash = j.value("model_hash", std::string());
    m.examples_per_class = j.value("examples_per_class", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("classmap: ") + e.what());
  }
  m.validate();
}

inline void save_classmap(const Classmap& m, const std::filesystem::path& path) {
  const std::string s = nlohmann::json(m).dump(2) + "\n";
  detail::write_file_atomic(path, s.data(), s.size());
}

inline Classmap load_classmap(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open classmap '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("classmap '" + path.string() + "': " + e.what());
  }
  return j.get<Classmap>();
}

// Fraction of classes whose robust labels agree.
inline double classmap_similarity(const Classmap& a, const Classmap& b) {
  if (a.classes() != b.classes()) {
    throw ConfigError("classmap_similarity: class counts " + std::to_string(a.classes()) +
                      " and " + std::to_string(b.classes()) + " differ");
  }
  if (a.classes() == 0) throw ConfigError("classmap_similarity: empty classmaps");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.classes(); ++i) same += a.robust[i] == b.robust[i];
  return static_cast<double>(same) / static_cast<double>(a.classes());
}

// Classmap from an adversarial batch, every example included whether or not
// the attack succeeded.
inline Classmap classmap_from_batch(const Model& model, const AdversarialBatch& batch) {
  Classmap m = encode_classmap(estimate_vulnerability(model, batch));
  m.source_attack = batch.attack;
  m.epsilon = batch.config.value("epsilon", 0.0);
  m.model_hash = weights_hash(model);
  return m;
}

// Nontargeted FGSM at `epsilon` over `data`, then vulnerability and encoding.
inline Classmap build_classmap(const Model& model, const Dataset& data, double epsilon,
                               std::uint64_t seed = 0) {
  AttackConfig cfg;
  cfg.kind = AttackKind::fgsm;
  cfg.epsilon = epsilon;
  return classmap_from_batch(model, batch_attack(model, data, cfg, seed));
}

struct LossWeights {
  double alpha = 0.4;
  double beta = 0.4;
  double gamma = 0.2;

  void validate() const {
    if (!(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0)) {
      throw ConfigError("loss weights must be non-negative");
    }
    if (std::abs(alpha + beta + gamma - 1.0) > 1e-9) {
      throw ConfigError("loss weights must sum to 1");
    }
  }
};

// Upper clamp on the auxiliary head's adversarial cross-entropy.
inline constexpr double kAuxClamp = 10.0;

// In-step FGSM examples on the current weights (inference mode, detached).
inline Tensor fgsm_examples(const Model& model, const Tensor& x, std::span<const int> y,
                            double epsilon) {
  const Tensor g = detail::ce_grad(model, x, y);
  Tensor adv = x;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    adv[i] = std::clamp(x[i] + epsilon * detail::sign(g[i]), 0.0, 1.0);
  }
  return adv;
}

// Training objective of one batch:
//   alpha * CE(main(x), y) + beta * CE(main(x_adv), y)
//     + gamma * 0.5 * (CE(Z'(x), r) - min(CE(Z'(x_adv), r), 10))
// with r the robust labels of y, x_adv the in-step FGSM examples at
// `eps_reg`, and every CE averaged over the batch.
inline LossOutput build_objective(Tape& tape, const Model& model, std::span<const Var> params,
                                  const Tensor& x, std::span<const int> y,
                                  const Classmap& classmap, const LossWeights& w,
                                  double eps_reg, std::uint64_t step_seed) {
  if (!is_defended(model.variant())) {
    throw ConfigError("build_objective: model must be a defended variant");
  }
  w.validate();
  std::vector<int> robust(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= classmap.classes()) {
      throw ConfigError("build_objective: classmap has no robust label for class " +
                        std::to_string(y[i]));
    }
    robust[i] = classmap.robust[static_cast<std::size_t>(y[i])];
  }
  const Tensor x_adv = fgsm_examples(model, x, y, eps_reg);

  Heads hb = model.forward(params, tape.leaf(x, false), {true, step_seed, LockHook::none});
  Heads ha = model.forward(params, tape.leaf(x_adv, false),
                           {true, step_seed ^ 0x5bd1e995ULL, LockHook::none});
  Var ce_b = mean(cross_entropy_with_logits(hb.main(), y));
  Var ce_a = mean(cross_entropy_with_logits(ha.main(), y));
  Var aux_b = mean(cross_entropy_with_logits(hb.z_prime, robust));
  Var aux_a = mean(clip(cross_entropy_with_logits(ha.z_prime, robust), 0.0, kAuxClamp));
  Var aux = scalar_mul(sub(aux_b, aux_a), 0.5);
  Var total = add(add(scalar_mul(ce_b, w.alpha), scalar_mul(ce_a, w.beta)),
                  scalar_mul(aux, w.gamma));
  return {total,
          hb.main(),
          {{"ce_benign", ce_b.value().item()},
           {"ce_adversarial", ce_a.value().item()},
           {"aux_benign", aux_b.value().item()},
           {"aux_adversarial_clamped", aux_a.value().item()},
           {"aux", aux.value().item()},
           {"total", total.value().item()}}};
}

// Trains a defended model for `epochs` passes with the multi-task objective.
// Lock-unit parameters are frozen and never touched.
inline std::vector<EpochMetrics> multitask_train(Model& model, const Dataset& data,
                                                 const Classmap& classmap, const LossWeights& w,
                                                 double eps_reg, std::size_t epochs,
                                                 std::uint64_t seed, OptimizerConfig opt_cfg = {},
                                                 std::ostream* log = nullptr) {
  if (!is_defended(model.variant())) {
    throw ConfigError("multitask_train: model must be defended_nolock or defended_locked");
  }
  w.validate();
  if (classmap.classes() != model.class_count()) {
    throw ConfigError("multitask_train: classmap covers " + std::to_string(classmap.classes()) +
                      " classes, model has " + std::to_string(model.class_count()));
  }
  Adam opt(opt_cfg);
  LossBuilder builder = [&](Tape& tape, const Model& m, std::span<const Var> params,
                            const Tensor& x, std::span<const int> y, std::uint64_t step_seed) {
    return build_objective(tape, m, params, x, y, classmap, w, eps_reg, step_seed);
  };
  std::vector<EpochMetrics> out;
  for (std::size_t e = 0; e < epochs; ++e) {
    out.push_back(train_epoch(model, data, builder, opt, seed, e));
    opt.end_epoch();
    if (log) {
      *log << "epoch " << e << " loss " << out.back().mean_loss << " acc "
           << out.back().accuracy << "\n";
    }
  }
  return out;
}

struct DetectionVerdict {
  bool accepted = false;
  int predicted = -1;  // argmax of the main head
  int auxiliary = -1;  // argmax of Z'
  bool matched_pair = false;
};

inline DetectionVerdict verdict_from_logits(std::span<const double> main_logits,
                                            std::span<const double> aux_logits,
                                            const Classmap& classmap) {
  DetectionVerdict v;
  v.predicted = argmax_of(main_logits);
  v.auxiliary = argmax_of(aux_logits);
  v.matched_pair = classmap.is_pair(v.predicted, v.auxiliary);
  v.accepted = v.matched_pair;
  return v;
}

inline std::vector<DetectionVerdict> detect_batch(const Model& model, const Classmap& classmap,
                                                  const Tensor& x) {
  if (!model.has_head(Head::z_prime)) throw ConfigError("detect: model has no Z' head");
  if (classmap.classes() != model.class_count()) {
    throw ConfigError("detect: classmap and model disagree on the class count");
  }
  std::vector<DetectionVerdict> out;
  if (x.dim(0) == 0) return out;
  const Tensor zm = predict_logits(model, x, Head::main);
  const Tensor zp = predict_logits(model, x, Head::z_prime);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    out.push_back(verdict_from_logits(detail::row_of(zm, i), detail::row_of(zp, i), classmap));
  }
  return out;
}

inline DetectionVerdict detect(const Model& model, const Classmap& classmap, const Tensor& x) {
  return detect_batch(model, classmap, x.reshaped(model.batch_shape(1))).front();
}

struct RejectSummary {
  std::vector<DetectionVerdict> verdicts;
  std::vector<int> labels;  // predicted label, or -1 when rejected
  std::size_t accepted = 0;
  std::size_t rejected = 0;

  double rejection_rate() const {
    return verdicts.empty() ? 0.0 : static_cast<double>(rejected) / verdicts.size();
  }
};

inline RejectSummary classify_or_reject(const Model& model, const Classmap& classmap,
                                        const Tensor& x) {
  RejectSummary s;
  s.verdicts = detect_batch(model, classmap, x);
  for (const auto& v : s.verdicts) {
    s.labels.push_back(v.accepted ? v.predicted : -1);
    (v.accepted ? s.accepted : s.rejected) += 1;
  }
  return s;
}

}  // namespace cmtd
