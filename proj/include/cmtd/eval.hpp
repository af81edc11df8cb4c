#pragma once

// Metrics, experiment scenarios and report writing.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtd/attacks.hpp"
#include "cmtd/data.hpp"
#include "cmtd/defence.hpp"
#include "cmtd/weights.hpp"

#ifndef CMTD_VERSION
#define CMTD_VERSION "0.0.0"
#endif

namespace cmtd {

inline double eval_accuracy(const Model& model, const Tensor& x, std::span<const int> labels,
                            Head head = Head::main) {
  if (labels.empty()) throw ConfigError("eval_accuracy: empty dataset");
  const auto pred = predict_labels(model, x, head);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

inline double eval_accuracy(const Model& model, const Dataset& data, Head head = Head::main) {
  return eval_accuracy(model, data.images, data.labels, head);
}

// Confusion counts with "adversarial" as the positive class.
struct DetectionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  // Undefined (nullopt) when nothing was flagged.
  std::optional<double> precision() const {
    if (tp + fp == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  double recall() const {
    return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  double misdetection() const {
    return fp + tn == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(fp + tn);
  }
};

inline DetectionCounts count_detections(const std::vector<bool>& adversarial_flagged,
                                        const std::vector<bool>& benign_flagged) {
  DetectionCounts c;
  for (bool f : adversarial_flagged) (f ? c.tp : c.fn) += 1;
  for (bool f : benign_flagged) (f ? c.fp : c.tn) += 1;
  return c;
}

struct DetectionPR {
  DetectionCounts counts;
  std::vector<bool> adversarial_flagged;
  std::vector<bool> benign_flagged;
};

inline std::vector<bool> flagged(const std::vector<DetectionVerdict>& v) {
  std::vector<bool> out;
  for (const auto& d : v) out.push_back(!d.accepted);
  return out;
}

inline DetectionPR detection_pr(const Model& defended, const Classmap& classmap,
                                const Tensor& adversarial, const Tensor& benign) {
  if (adversarial.rank() == 0 || adversarial.dim(0) == 0) {
    throw ConfigError("detection_pr: empty adversarial set");
  }
  DetectionPR r;
  r.adversarial_flagged = flagged(detect_batch(defended, classmap, adversarial));
  r.benign_flagged = flagged(detect_batch(defended, classmap, benign));
  r.counts = count_detections(r.adversarial_flagged, r.benign_flagged);
  return r;
}

// Replay of substitute-crafted examples on a target model. A transfer is a
// successfully crafted example that changes the target's main-head label
// relative to its label on the benign original; attack failures count as
// non-transfers and are reported separately.
struct TransferCell {
  double kappa = 0.0;
  std::size_t attempted = 0;
  std::size_t crafted = 0;
  std::size_t attack_failures = 0;
  std::size_t transferred = 0;
  std::vector<int> benign_pred;
  std::vector<int> adversarial_pred;  // over the crafted examples

  double rate() const {
    return attempted == 0 ? 0.0 : static_cast<double>(transferred) / static_cast<double>(attempted);
  }
};

inline TransferCell transfer_rate(const Model& target, const AdversarialBatch& batch,
                                  double kappa = 0.0) {
  TransferCell c;
  c.kappa = kappa;
  c.attempted = batch.size();
  const auto idx = batch.successful_indices();
  c.crafted = idx.size();
  c.attack_failures = c.attempted - c.crafted;
  if (idx.empty()) return c;
  c.benign_pred = predict_labels(target, batch.originals.gather_rows(idx));
  c.adversarial_pred = predict_labels(target, batch.perturbed.gather_rows(idx));
  for (std::size_t i = 0; i < idx.size(); ++i) c.transferred += c.adversarial_pred[i] != c.benign_pred[i];
  return c;
}

// Nontargeted C&W on `substitute` for each kappa.
inline std::vector<AdversarialBatch> craft_cw_sweep(const Model& substitute, const Dataset& data,
                                                    const std::vector<double>& kappas,
                                                    AttackConfig solver, std::uint64_t seed) {
  std::vector<AdversarialBatch> out;
  solver.kind = AttackKind::cw_l2;
  solver.targeted = false;
  for (double k : kappas) {
    solver.kappa = k;
    out.push_back(batch_attack(substitute, data, solver, seed));
  }
  return out;
}

inline std::vector<TransferCell> transfer_sweep(const Model& substitute, const Model& target,
                                                const std::vector<double>& kappas,
                                                const Dataset& data, std::size_t n,
                                                std::uint64_t seed, AttackConfig solver = {}) {
  if (n == 0 || kappas.empty()) return {};
  if (substitute.spec().input_shape != target.spec().input_shape) {
    throw ConfigError("transfer_sweep: substitute and target input shapes differ");
  }
  const auto batches = craft_cw_sweep(substitute, data.head(n), kappas, solver, seed);
  std::vector<TransferCell> out;
  for (std::size_t i = 0; i < kappas.size(); ++i) out.push_back(transfer_rate(target, batches[i], kappas[i]));
  return out;
}

// Grey-box generation: fraction of inputs for which the attack finds a valid
// adversarial example. Defended models are attacked with the two-head loss
// (success needs the main label adversarial and Z' on its Classmap pair);
// plain models with single-head C&W.
struct GenerationCell {
  double kappa = 0.0;
  bool targeted = false;
  std::size_t attempted = 0;
  std::size_t generated = 0;
  std::vector<bool> success;

  double rate() const {
    return attempted == 0 ? 0.0 : static_cast<double>(generated) / static_cast<double>(attempted);
  }
};

inline std::vector<GenerationCell> generation_rate(const Model& model, const Dataset& data,
                                                   const std::vector<double>& kappas,
                                                   bool targeted, const Classmap* classmap,
                                                   std::uint64_t seed, AttackConfig solver = {}) {
  const bool defended = model.has_head(Head::z_prime);
  solver.kind = defended ? AttackKind::cw_l2_combined : AttackKind::cw_l2;
  if (defended) {
    if (!classmap) throw ConfigError("generation_rate: defended model needs a classmap");
    solver.classmap = classmap->robust;
  }
  solver.targeted = targeted;
  solver.target_class = -1;
  solver.stop_at_first_success = true;
  std::vector<GenerationCell> out;
  for (double k : kappas) {
    solver.kappa = k;
    const auto b = batch_attack(model, data, solver, seed);
    GenerationCell c;
    c.kappa = k;
    c.targeted = targeted;
    c.attempted = b.size();
    c.generated = b.success_count();
    c.success = b.success;
    out.push_back(std::move(c));
  }
  return out;
}

struct BenignTradeoff {
  double oracle_accuracy = 0.0;
  double defended_accuracy = 0.0;
  double misdetection_rate = 0.0;
  std::vector<int> oracle_pred, defended_pred;
  std::vector<bool> rejected;

  double drop() const { return oracle_accuracy - defended_accuracy; }
};

inline BenignTradeoff benign_tradeoff(const Model& oracle, const Model& defended,
                                      const Classmap& classmap, const Dataset& test) {
  if (test.empty()) throw ConfigError("benign_tradeoff: empty test set");
  BenignTradeoff t;
  t.oracle_pred = predict_labels(oracle, test.images);
  t.defended_pred = predict_labels(defended, test.images);
  std::size_t a = 0, b = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    a += t.oracle_pred[i] == test.labels[i];
    b += t.defended_pred[i] == test.labels[i];
  }
  t.oracle_accuracy = static_cast<double>(a) / test.size();
  t.defended_accuracy = static_cast<double>(b) / test.size();
  if (defended.has_head(Head::z_prime)) {
    t.rejected = flagged(detect_batch(defended, classmap, test.images));
    t.misdetection_rate =
        static_cast<double>(std::count(t.rejected.begin(), t.rejected.end(), true)) / test.size();
  }
  return t;
}

// ---------------------------------------------------------------------------
// Experiment runner

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = {
      "blackbox_accuracy", "transfer_sweep",    "detection_pr",       "worst_case_blackbox",
      "greybox_generation", "benign_tradeoff", "classmap_similarity"};
  return names;
}

// Attack settings the harness uses for the black-box table when none are
// given: FGSM and IGS at eps 0.1, DeepFool, JSMA with full-scale steps.
inline std::vector<AttackConfig> default_blackbox_attacks() {
  AttackConfig f;
  f.kind = AttackKind::fgsm;
  AttackConfig i;
  i.kind = AttackKind::igs;
  i.igs_ascent = true;
  AttackConfig d;
  d.kind = AttackKind::deepfool_linf;
  AttackConfig j;
  j.kind = AttackKind::jsma;
  j.jsma_theta = 1.0;
  return {f, i, d, j};
}

struct ExperimentConfig {
  std::string scenario;
  std::filesystem::path data;
  std::map<std::string, std::filesystem::path> models;  // oracle, substitute, defended, defended_nolock
  std::optional<std::filesystem::path> classmap;
  std::vector<AttackConfig> attacks;
  AttackConfig cw;  // solver settings for C&W-based scenarios
  std::vector<double> kappas;
  std::size_t n = 1000;
  std::size_t n_per_class = 50;
  std::string substitute_mode = "normal";
  std::uint64_t seed = 0;
  std::filesystem::path output;
  nlohmann::json echo;

  bool has_model(const std::string& k) const { return models.count(k) != 0; }

  // Throws ConfigError naming the first missing field or file.
  void validate() const {
    const auto& names = scenario_names();
    if (std::find(names.begin(), names.end(), scenario) == names.end()) {
      throw ConfigError("unknown scenario '" + scenario + "'");
    }
    std::vector<std::string> need;
    bool need_cm = false, need_kappas = false;
    if (scenario == "blackbox_accuracy") need = {"substitute", "oracle", "defended"};
    if (scenario == "transfer_sweep") need = {"substitute", "defended"}, need_kappas = true;
    if (scenario == "detection_pr") {
      need = {"defended"};
      if (substitute_mode != "worst_case") need.push_back("substitute");
      need_cm = need_kappas = true;
    }
    if (scenario == "worst_case_blackbox") need = {"defended"}, need_cm = need_kappas = true;
    if (scenario == "greybox_generation") need = {"defended"}, need_cm = need_kappas = true;
    if (scenario == "benign_tradeoff") need = {"oracle", "defended"}, need_cm = true;
    if (scenario == "classmap_similarity") need = {"oracle"};
    if (data.empty()) throw ConfigError(scenario + ": missing field 'data'");
    if (!std::filesystem::exists(data)) throw ConfigError("data directory '" + data.string() + "' does not exist");
    for (const auto& m : need) {
      if (!has_model(m)) throw ConfigError(scenario + ": missing field 'models." + m + "'");
    }
    for (const auto& [k, p] : models) {
      if (!std::filesystem::exists(p)) throw ConfigError("weight file '" + p.string() + "' does not exist");
    }
    if (need_cm && !classmap) throw ConfigError(scenario + ": missing field 'classmap'");
    if (classmap && !std::filesystem::exists(*classmap)) {
      throw ConfigError("classmap file '" + classmap->string() + "' does not exist");
    }
    if (need_kappas && kappas.empty()) throw ConfigError(scenario + ": missing field 'kappas'");
    for (double k : kappas) {
      if (!(k >= 0.0)) throw ConfigError("kappas must be >= 0");
    }
    if (substitute_mode != "normal" && substitute_mode != "worst_case") {
      throw ConfigError("substitute_mode must be 'normal' or 'worst_case'");
    }
    for (const auto& a : attacks) a.validate();
    cw.validate();
  }
};

// Relative paths resolve against `base`.
inline ExperimentConfig parse_experiment(const nlohmann::json& j,
                                         const std::filesystem::path& base = {}) {
  static const std::set<std::string> known = {"scenario", "data",        "models", "classmap",
                                              "attacks",  "cw",          "kappas", "n",
                                              "n_per_class", "substitute_mode", "seed", "output"};
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("experiment config: unknown field '" + k + "'");
  }
  auto path = [&](const std::string& s) {
    std::filesystem::path p(s);
    return p.is_absolute() || base.empty() ? p : base / p;
  };
  ExperimentConfig c;
  c.echo = j;
  try {
    c.scenario = j.value("scenario", std::string());
    if (j.contains("data")) c.data = path(j.at("data").get<std::string>());
    if (j.contains("models")) {
      for (const auto& [k, v] : j.at("models").items()) c.models[k] = path(v.get<std::string>());
    }
    if (j.contains("classmap")) c.classmap = path(j.at("classmap").get<std::string>());
    if (j.contains("attacks")) {
      for (const auto& a : j.at("attacks")) c.attacks.push_back(a.get<AttackConfig>());
    }
    if (j.contains("cw")) {
      nlohmann::json cw = j.at("cw");
      if (!cw.contains("kind")) cw["kind"] = "cw_l2";
      c.cw = cw.get<AttackConfig>();
    } else {
      c.cw.kind = AttackKind::cw_l2;
    }
    c.kappas = j.value("kappas", std::vector<double>{});
    c.n = j.value("n", c.n);
    c.n_per_class = j.value("n_per_class", c.n_per_class);
    c.substitute_mode = j.value("substitute_mode", c.substitute_mode);
    c.seed = j.value("seed", c.seed);
    if (j.contains("output")) c.output = path(j.at("output").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  if (c.attacks.empty()) {
    if (c.scenario == "blackbox_accuracy") c.attacks = default_blackbox_attacks();
    if (c.scenario == "classmap_similarity") {
      AttackConfig f, i, d, w;
      f.kind = AttackKind::fgsm;
      i.kind = AttackKind::igs;
      i.igs_ascent = true;
      d.kind = AttackKind::deepfool_linf;
      w = c.cw;
      w.kind = AttackKind::cw_l2;
      c.attacks = {f, i, d, w};
    }
  }
  return c;
}

struct EvalReport {
  nlohmann::json json;
  std::map<std::string, std::string> csv;  // sidecar name -> content
  bool ok = true;
};

namespace detail {

inline nlohmann::json bools(const std::vector<bool>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (bool b : v) a.push_back(b ? 1 : 0);
  return a;
}

inline nlohmann::json rate_or_null(std::optional<double> v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::string csv_num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

// First n test examples, or all when the split is shorter.
inline Dataset eval_slice(const Dataset& test, std::size_t n) { return test.head(n); }

// `count` benign test examples taken from the end of the split, so they do not
// overlap the attacked prefix when the split is long enough.
inline Tensor benign_tail(const Dataset& test, std::size_t count) {
  count = std::min(count, test.size());
  return test.images.rows(test.size() - count, test.size());
}

inline Model plain_copy_of(const Model& defended) {
  ModelSpec s = defended.spec();
  s.variant = Variant::plain;
  return clone_as_substitute(defended, s, SubstituteMode::worst_case, defended.seed());
}

inline void detection_cells(const ExperimentConfig& cfg, const Model& substitute,
                            const Model& defended, const Classmap& cm, const Dataset& test,
                            EvalReport& rep) {
  const Dataset slice = eval_slice(test, cfg.n);
  const auto batches = craft_cw_sweep(substitute, slice, cfg.kappas, cfg.cw, cfg.seed);
  std::string csv = "kappa,precision,recall,tp,fp,fn,tn\n";
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto idx = batches[i].successful_indices();
    nlohmann::json cell = {{"kappa", cfg.kappas[i]},
                           {"attempted", batches[i].size()},
                           {"crafted", idx.size()}};
    if (idx.empty()) {
      cell["precision"] = nullptr;
      cell["recall"] = nullptr;
      cell["note"] = "no successful adversarial examples";
    } else {
      const Tensor adv = batches[i].perturbed.gather_rows(idx);
      const auto pr = detection_pr(defended, cm, adv, benign_tail(test, idx.size()));
      cell["precision"] = rate_or_null(pr.counts.precision());
      cell["recall"] = pr.counts.recall();
      cell["counts"] = {{"tp", pr.counts.tp}, {"fp", pr.counts.fp}, {"fn", pr.counts.fn}, {"tn", pr.counts.tn}};
      cell["records"] = {{"adversarial_flagged", bools(pr.adversarial_flagged)},
                         {"benign_flagged", bools(pr.benign_flagged)}};
      csv += csv_num(cfg.kappas[i]) + "," +
             (pr.counts.precision() ? csv_num(*pr.counts.precision()) : std::string()) + "," +
             csv_num(pr.counts.recall()) + "," + std::to_string(pr.counts.tp) + "," +
             std::to_string(pr.counts.fp) + "," + std::to_string(pr.counts.fn) + "," +
             std::to_string(pr.counts.tn) + "\n";
    }
    rep.json["cells"].push_back(cell);
  }
  rep.csv["detection_pr"] = csv;
}

}  // namespace detail

// Runs one scenario. Failures after validation produce a partial report with
// an "error" section and ok == false; configuration problems throw
// ConfigError before any compute.
inline EvalReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.json = {{"scenario", cfg.scenario},
              {"toolkit_version", CMTD_VERSION},
              {"seed", cfg.seed},
              {"config", cfg.echo},
              {"cells", nlohmann::json::array()}};
  std::string stage = "load";
  try {
    std::map<std::string, Model> models;
    for (const auto& [k, p] : cfg.models) models.emplace(k, load_weights(p));
    std::optional<Classmap> cm;
    if (cfg.classmap) cm = load_classmap(*cfg.classmap);
    const DatasetPair data = load_dataset_dir(cfg.data);
    rep.json["data"] = {{"train_size", data.train.size()},
                        {"test_size", data.test.size()},
                        {"source_hashes", data.test.provenance.source_hashes}};
    auto model = [&](const std::string& k) -> const Model& { return models.at(k); };

    stage = cfg.scenario;
    if (cfg.scenario == "blackbox_accuracy") {
      const Dataset slice = detail::eval_slice(data.test, cfg.n);
      std::string csv = "attack,substitute_success,oracle_accuracy,defended_accuracy\n";
      for (const auto& a : cfg.attacks) {
        const auto b = batch_attack(model("substitute"), slice, a, cfg.seed);
        const auto po = predict_labels(model("oracle"), b.perturbed);
        const auto pd = predict_labels(model("defended"), b.perturbed);
        std::size_t co = 0, cd = 0;
        for (std::size_t i = 0; i < b.size(); ++i) {
          co += po[i] == b.labels[i];
          cd += pd[i] == b.labels[i];
        }
        const double n = static_cast<double>(std::max<std::size_t>(b.size(), 1));
        const double so = b.success_count() / n;
        rep.json["cells"].push_back({{"attack", b.attack},
                                     {"config", b.config},
                                     {"n", b.size()},
                                     {"substitute_success", so},
                                     {"oracle_accuracy", co / n},
                                     {"defended_accuracy", cd / n},
                                     {"records", {{"labels", b.labels},
                                                  {"oracle_pred", po},
                                                  {"defended_pred", pd}}}});
        csv += b.attack + "," + detail::csv_num(so) + "," + detail::csv_num(co / n) + "," +
               detail::csv_num(cd / n) + "\n";
      }
      rep.csv["blackbox_accuracy"] = csv;
    } else if (cfg.scenario == "transfer_sweep") {
      const Dataset slice = detail::eval_slice(data.test, cfg.n);
      const auto batches = craft_cw_sweep(model("substitute"), slice, cfg.kappas, cfg.cw, cfg.seed);
      std::vector<std::string> targets = {"defended"};
      if (cfg.has_model("oracle")) targets.push_back("oracle");
      std::string csv = "kappa";
      for (const auto& t : targets) csv += "," + t + "_rate";
      csv += "\n";
      for (std::size_t i = 0; i < batches.size(); ++i) {
        nlohmann::json cell = {{"kappa", cfg.kappas[i]}};
        csv += detail::csv_num(cfg.kappas[i]);
        for (const auto& t : targets) {
          const auto tc = transfer_rate(model(t), batches[i], cfg.kappas[i]);
          cell[t] = {{"attempted", tc.attempted},
                     {"crafted", tc.crafted},
                     {"attack_failures", tc.attack_failures},
                     {"transferred", tc.transferred},
                     {"rate", tc.rate()},
                     {"records", {{"benign_pred", tc.benign_pred},
                                  {"adversarial_pred", tc.adversarial_pred}}}};
          csv += "," + detail::csv_num(tc.rate());
        }
        csv += "\n";
        rep.json["cells"].push_back(cell);
      }
      rep.csv["transfer_sweep"] = csv;
    } else if (cfg.scenario == "detection_pr" || cfg.scenario == "worst_case_blackbox") {
      const bool worst = cfg.scenario == "worst_case_blackbox" || cfg.substitute_mode == "worst_case";
      const Model sub = worst ? detail::plain_copy_of(model("defended")) : model("substitute");
      rep.json["substitute_mode"] = worst ? "worst_case" : "normal";
      detail::detection_cells(cfg, sub, model("defended"), *cm, data.test, rep);
    } else if (cfg.scenario == "greybox_generation") {
      const Dataset slice = detail::eval_slice(data.test, cfg.n);
      std::vector<std::string> targets = {"defended"};
      for (const char* extra : {"defended_nolock", "oracle"})
        if (cfg.has_model(extra)) targets.push_back(extra);
      std::string csv = "model,mode,kappa,rate\n";
      for (const auto& t : targets) {
        for (bool targeted : {true, false}) {
          const auto cells = generation_rate(model(t), slice, cfg.kappas, targeted, &*cm, cfg.seed, cfg.cw);
          for (const auto& c : cells) {
            const char* mode = targeted ? "targeted" : "nontargeted";
            rep.json["cells"].push_back({{"model", t},
                                         {"mode", mode},
                                         {"kappa", c.kappa},
                                         {"attempted", c.attempted},
                                         {"generated", c.generated},
                                         {"rate", c.rate()},
                                         {"records", {{"success", detail::bools(c.success)}}}});
            csv += t + "," + mode + "," + detail::csv_num(c.kappa) + "," + detail::csv_num(c.rate()) + "\n";
          }
        }
      }
      rep.csv["greybox_generation"] = csv;
    } else if (cfg.scenario == "benign_tradeoff") {
      const auto t = benign_tradeoff(model("oracle"), model("defended"), *cm, data.test);
      rep.json["cells"].push_back({{"n", data.test.size()},
                                   {"oracle_accuracy", t.oracle_accuracy},
                                   {"defended_accuracy", t.defended_accuracy},
                                   {"accuracy_drop", t.drop()},
                                   {"misdetection_rate", t.misdetection_rate},
                                   {"records", {{"labels", data.test.labels},
                                                {"oracle_pred", t.oracle_pred},
                                                {"defended_pred", t.defended_pred},
                                                {"rejected", detail::bools(t.rejected)}}}});
    } else if (cfg.scenario == "classmap_similarity") {
      const Dataset subset = make_desk_subset(data.train, cfg.n_per_class, cfg.seed);
      std::vector<Classmap> maps;
      std::string csv = "attack,agreement_with_first\n";
      for (const auto& a : cfg.attacks) {
        maps.push_back(classmap_from_batch(model("oracle"), batch_attack(model("oracle"), subset, a, cfg.seed)));
        const double sim = classmap_similarity(maps.front(), maps.back());
        rep.json["cells"].push_back({{"attack", std::string(attack_name(a.kind))},
                                     {"classmap", maps.back()},
                                     {"agreement_with_first", sim}});
        csv += std::string(attack_name(a.kind)) + "," + detail::csv_num(sim) + "\n";
      }
      rep.csv["classmap_similarity"] = csv;
    }
    rep.json["status"] = "ok";
  } catch (const std::exception& e) {
    rep.ok = false;
    rep.json["status"] = "error";
    rep.json["error"] = {{"stage", stage}, {"message", e.what()}};
  }
  rep.json["runtime_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// Writes the JSON report atomically and one CSV sidecar per sweep next to it
// (<stem>.<name>.csv).
inline void write_report(const EvalReport& rep, const std::filesystem::path& path) {
  const std::string s = rep.json.dump(2) + "\n";
  detail::write_file_atomic(path, s.data(), s.size());
  for (const auto& [name, content] : rep.csv) {
    auto side = path;
    side.replace_filename(path.stem().string() + "." + name + ".csv");
    detail::write_file_atomic(side, content.data(), content.size());
  }
}

}  // namespace cmtd
