// End-to-end acceptance run on the desk MNIST set. Prints one PASS/FAIL line
// per criterion and exits non-zero when any criterion fails.
//
// Trained models are cached under CMTD_CACHE_DIR and reused across runs;
// delete the directory to retrain. Pass criterion numbers as arguments to run
// a subset.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "cmtd/cmtd.hpp"

namespace fs = std::filesystem;
using namespace cmtd;
using json = nlohmann::json;

namespace {

constexpr std::size_t kOracleEpochs = 10;
constexpr std::size_t kSubstituteEpochs = 10;
constexpr std::size_t kDefendedEpochs = 60;

fs::path cache_dir() {
  if (const char* env = std::getenv("CMTD_ACCEPTANCE_CACHE")) return env;
  return CMTD_CACHE_DIR;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Cached desk models

struct Desk {
  DatasetPair data;
  fs::path oracle, substitute, classmap, locked, nolock;
};

template <typename Make>
fs::path cached(const fs::path& path, Make make) {
  if (!fs::exists(path)) {
    std::cerr << "[acceptance] building " << path.filename().string() << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    make(path);
    std::cerr << "[acceptance]   done in " << fmt(seconds_since(t0), 3) << " s\n";
  }
  return path;
}

Desk& desk() {
  static std::optional<Desk> d;
  if (d) return *d;
  d.emplace();
  const fs::path dir = cache_dir();
  fs::create_directories(dir);
  d->data = load_dataset_dir(CMTD_DATA_DIR);
  const Dataset& train = d->data.train;

  d->oracle = cached(dir / "oracle.cmtd", [&](const fs::path& p) {
    Model m = build_model(presets::desk_oracle(), 1);
    train_plain(m, train, kOracleEpochs, 1, {}, &std::cerr);
    save_weights(m, p, {{"epochs", kOracleEpochs}});
  });
  d->substitute = cached(dir / "substitute.cmtd", [&](const fs::path& p) {
    Model m = build_model(presets::desk_substitute(), 2);
    train_plain(m, train, kSubstituteEpochs, 2, {}, &std::cerr);
    save_weights(m, p, {{"epochs", kSubstituteEpochs}});
  });
  d->classmap = cached(dir / "classmap.json", [&](const fs::path& p) {
    save_classmap(build_classmap(load_weights(d->oracle), train, 0.1, 3), p);
  });
  const Classmap cm = load_classmap(d->classmap);
  auto defended = [&](Variant v) {
    return [&, v](const fs::path& p) {
      Model m = build_model(presets::desk_oracle(v), 1);
      multitask_train(m, train, cm, LossWeights{}, 0.1, kDefendedEpochs, 1, {}, &std::cerr);
      save_weights(m, p, {{"epochs", kDefendedEpochs}});
    };
  };
  d->locked = cached(dir / "defended_locked.cmtd", defended(Variant::defended_locked));
  d->nolock = cached(dir / "defended_nolock.cmtd", defended(Variant::defended_nolock));
  return *d;
}

EvalReport experiment(const std::string& tag, json cfg) {
  Desk& d = desk();
  cfg["data"] = CMTD_DATA_DIR;
  cfg["classmap"] = d.classmap.string();
  EvalReport rep = run_experiment(parse_experiment(cfg));
  fs::create_directories(cache_dir() / "reports");
  write_report(rep, cache_dir() / "reports" / (tag + ".json"));
  if (!rep.ok) throw std::runtime_error(tag + ": " + rep.json.at("error").dump());
  return rep;
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

Var weighted(Var y, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-1.0, 1.0);
  return sum(mul(y, y.tape().constant(w)));
}

Tensor rand_tensor(Shape s, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// One check per op kind on tensors drawn from `rng`.
std::vector<std::pair<std::string, FdReport>> op_battery(SplitMix64& rng, double tol) {
  std::vector<std::pair<std::string, FdReport>> out;
  auto check = [&](const std::string& name, const ScalarFn& fn, const Tensor& x) {
    out.emplace_back(name, finite_difference_check(fn, x, 1e-5, tol, 12, rng.next()));
  };
  const Tensor m = rand_tensor({3, 4}, rng);
  const Tensor o = rand_tensor({3, 4}, rng);
  const Tensor soft = rand_tensor({3, 4}, rng, 0.0, 1.0);
  const std::vector<int> lbl = {static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4)),
                                static_cast<int>(rng.below(4))};
  const std::uint64_t s = rng.next();
  check("relu", [&](Tape&, Var x) { return weighted(relu(x), s); }, m);
  check("tanh", [&](Tape&, Var x) { return weighted(tanh(x), s); }, m);
  check("log", [&](Tape&, Var x) { return weighted(log(add_scalar(mul(x, x), 0.5)), s); }, m);
  check("negate", [&](Tape&, Var x) { return weighted(negate(x), s); }, m);
  check("scalar_mul", [&](Tape&, Var x) { return weighted(scalar_mul(x, -1.7), s); }, m);
  check("add_scalar", [&](Tape&, Var x) { return weighted(add_scalar(mul(x, x), 2.0), s); }, m);
  check("clip", [&](Tape&, Var x) { return weighted(clip(x, -0.4, 0.6), s); }, m);
  check("sum", [&](Tape&, Var x) { return sum(mul(x, x)); }, m);
  check("mean", [&](Tape&, Var x) { return mean(mul(x, x)); }, m);
  check("row_sum", [&](Tape&, Var x) { return weighted(row_sum(mul(x, x)), s); }, m);
  check("softmax", [&](Tape&, Var x) { return weighted(softmax(x), s); }, m);
  check("reshape", [&](Tape&, Var x) { return weighted(reshape(mul(x, x), {2, 6}), s); }, m);
  check("dropout", [&](Tape&, Var x) { return weighted(dropout(mul(x, x), 0.3, true, s), s); }, m);
  check("cross_entropy", [&](Tape&, Var x) { return weighted(cross_entropy_with_logits(x, lbl), s); }, m);
  check("cross_entropy_soft", [&](Tape&, Var x) { return weighted(cross_entropy_with_logits(x, soft), s); }, m);
  check("pick", [&](Tape&, Var x) { return weighted(pick(x, lbl), s); }, m);
  check("max_excluding", [&](Tape&, Var x) { return weighted(max_excluding(x, lbl), s); }, m);
  check("add", [&](Tape& t, Var x) { return weighted(add(x, t.constant(o)), s); }, m);
  check("sub", [&](Tape& t, Var x) { return weighted(sub(t.constant(o), x), s); }, m);
  check("elementwise_mul", [&](Tape& t, Var x) { return weighted(mul(x, t.constant(o)), s); }, m);
  const Tensor w = rand_tensor({5, 4}, rng), b = rand_tensor({5}, rng);
  check("dense.x", [&](Tape& t, Var x) { return weighted(dense(x, t.constant(w), t.constant(b)), s); }, m);
  check("dense.w", [&](Tape& t, Var v) { return weighted(dense(t.constant(m), v, t.constant(b)), s); }, w);
  check("dense.b", [&](Tape& t, Var v) { return weighted(dense(t.constant(m), t.constant(w), v), s); }, b);
  const Tensor img = rand_tensor({2, 2, 6, 6}, rng);
  const Tensor k = rand_tensor({3, 2, 3, 3}, rng), kb = rand_tensor({3}, rng);
  for (std::size_t pad : {0u, 1u}) {
    const std::string p = std::to_string(pad);
    check("conv2d.x.pad" + p, [&](Tape& t, Var x) { return weighted(conv2d(x, t.constant(k), t.constant(kb), pad), s); }, img);
    check("conv2d.w.pad" + p, [&](Tape& t, Var v) { return weighted(conv2d(t.constant(img), v, t.constant(kb), pad), s); }, k);
    check("conv2d.b.pad" + p, [&](Tape& t, Var v) { return weighted(conv2d(t.constant(img), t.constant(k), v, pad), s); }, kb);
  }
  check("maxpool", [&](Tape&, Var x) { return weighted(maxpool2x2(x), s); }, img);
  return out;
}

ModelSpec random_spec(SplitMix64& rng) {
  ModelSpec s;
  const std::size_t c = 1 + rng.below(2), hw = 6 + 2 * rng.below(2);
  s.input_shape = {c, hw, hw};
  s.class_count = 3 + rng.below(2);
  const std::size_t convs = 1 + rng.below(2);
  for (std::size_t i = 0; i < convs; ++i) s.layers.push_back(LayerSpec::conv(2 + rng.below(2), 3, rng.below(2)));
  if (rng.below(2)) s.layers.push_back(LayerSpec::maxpool());
  if (rng.below(2)) s.layers.push_back(LayerSpec::dropout(0.3));
  if (rng.below(2)) s.layers.push_back(LayerSpec::dense(4 + rng.below(3)));
  s.variant = static_cast<Variant>(rng.below(3));
  return s;
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  const double tol = 1e-4;
  double worst = 0.0;
  std::size_t checked = 0, excluded = 0;
  std::vector<std::string> failures;
  SplitMix64 master(2024);
  for (int net = 0; net < 50; ++net) {
    SplitMix64 rng = master.fork(static_cast<std::uint64_t>(net));
    const ModelSpec spec = random_spec(rng);
    const Model model = build_model(spec, rng.next());
    Shape xs{2};
    xs.insert(xs.end(), spec.input_shape.begin(), spec.input_shape.end());
    const Tensor x = rand_tensor(xs, rng, 0.0, 1.0);
    std::vector<int> labels = {static_cast<int>(rng.below(spec.class_count)),
                               static_cast<int>(rng.below(spec.class_count))};
    const ForwardOptions opt{true, rng.next(), LockHook::none};
    std::vector<std::pair<std::string, FdReport>> reps;
    reps.emplace_back("net.ce.main", finite_difference_check(model, x, LossSpec::cross_entropy(labels), 1e-5, tol, 24, rng.next(), opt));
    if (is_defended(spec.variant)) {
      reps.emplace_back("net.logit.z_prime", finite_difference_check(model, x, LossSpec::logit(0, Head::z_prime), 1e-5, tol, 24, rng.next(), opt));
    }
    for (auto& r : op_battery(rng, tol)) reps.push_back(std::move(r));
    for (const auto& [name, r] : reps) {
      worst = std::max(worst, r.max_rel_error);
      checked += r.checked;
      excluded += r.excluded;
      if (!r.passed || r.checked == 0) failures.push_back("net " + std::to_string(net) + " " + name);
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures.empty() && secs < 60.0;
  o.detail = "50 nets, " + std::to_string(checked) + " coords checked, " + std::to_string(excluded) +
             " excluded at kinks, max rel error " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s";
  if (!failures.empty()) o.detail += ", first failure: " + failures.front();
  return o;
}

// ---------------------------------------------------------------------------
// 2. Attack soundness

Outcome criterion2() {
  Desk& d = desk();
  const Model oracle = load_weights(d.oracle);
  const Model locked = load_weights(d.locked);
  const Classmap cm = load_classmap(d.classmap);
  // Timed from here: model training is shared setup, not part of the suite.
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(77);
  auto perm = rng.permutation(d.data.test.size());
  perm.resize(100);
  const Dataset sample = d.data.test.subset(perm);

  struct Case {
    std::string name;
    const Model* model;
    AttackConfig cfg;
  };
  std::vector<Case> cases;
  for (const auto& a : default_blackbox_attacks()) cases.push_back({std::string(attack_name(a.kind)), &oracle, a});
  AttackConfig cw;
  cw.kind = AttackKind::cw_l2;
  cases.push_back({"cw_l2", &oracle, cw});
  AttackConfig comb;
  comb.kind = AttackKind::cw_l2_combined;
  comb.classmap = cm.robust;
  cases.push_back({"cw_l2_combined", &locked, comb});

  std::vector<std::string> violations;
  std::string summary;
  for (const auto& c : cases) {
    const auto res = attack_batch(*c.model, sample.images, sample.labels, c.cfg);
    const std::size_t d_px = sample.images.row_size(), k = c.model->class_count();
    std::size_t succ = 0;
    for (std::size_t i = 0; i < res.size(); ++i) {
      const AttackResult& r = res[i];
      auto bad = [&](const std::string& what) {
        violations.push_back(c.name + " example " + std::to_string(i) + ": " + what);
      };
      const auto x0 = sample.images.data().subspan(i * d_px, d_px);
      const auto xa = r.perturbed.data();
      for (double v : xa)
        if (!(v >= 0.0 && v <= 1.0)) {
          bad("pixel outside [0,1]");
          break;
        }
      const Distortion dist = distortion(x0, xa);
      if (std::abs(dist.l2 - r.l2) > 1e-9 || std::abs(dist.linf - r.linf) > 1e-12) bad("distortion mismatch");
      switch (c.cfg.kind) {
        case AttackKind::fgsm:
        case AttackKind::igs:
          if (dist.linf > c.cfg.epsilon + 1e-12) bad("linf above epsilon");
          break;
        case AttackKind::jsma: {
          std::size_t changed = 0;
          for (std::size_t j = 0; j < d_px; ++j) {
            if (xa[j] < x0[j]) bad("pixel decreased");
            changed += xa[j] != x0[j];
          }
          if (changed > detail::jsma_budget(c.cfg.jsma_max_distortion, d_px)) bad("pixel budget exceeded");
          break;
        }
        case AttackKind::deepfool_linf:
          if (dist.linf > c.cfg.overshoot * r.step_norm_sum + 1e-12) bad("linf above step bound");
          break;
        default: break;
      }
      if (!r.success) continue;
      ++succ;
      const HeadValues hv = forward_heads(*c.model, r.perturbed.reshaped(c.model->batch_shape(1)));
      const auto zm = hv.get(Head::main).data();
      if (c.cfg.kind == AttackKind::deepfool_linf && r.degenerate) continue;
      if (!adversarial_condition(zm, sample.labels[i], r.target)) bad("success without misclassification");
      if (c.cfg.kind == AttackKind::cw_l2 && attack_margin(zm, sample.labels[i], r.target) < c.cfg.kappa)
        bad("margin below kappa");
      if (c.cfg.kind == AttackKind::cw_l2_combined) {
        const int t = argmax_of(zm);
        const auto zp = hv.get(Head::z_prime).data();
        if (argmax_of(zp) != cm.robust[static_cast<std::size_t>(t)]) bad("Z' not at the paired label");
        (void)k;
      }
    }
    summary += c.name + " " + std::to_string(succ) + "/100, ";
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = violations.empty() && secs < 600.0;
  o.detail = summary + std::to_string(violations.size()) + " violations, " + fmt(secs, 3) + " s";
  if (!violations.empty()) o.detail += ", first: " + violations.front();
  return o;
}

// ---------------------------------------------------------------------------
// 3. C&W optimality on a 2-pixel linear model

Outcome criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  struct Case {
    std::vector<double> w, b, x;
    double kappa;
  };
  const std::vector<Case> cases = {
      {{0.0, 0.0, 1.0, 2.0}, {0.0, -1.5}, {0.1, 0.1}, 0.0},
      {{0.0, 0.0, 1.0, 2.0}, {0.0, -1.5}, {0.1, 0.1}, 0.3},
      {{0.5, -1.0, -0.5, 1.0}, {0.2, 0.0}, {0.6, 0.3}, 0.0},
      {{0.0, 0.0, 3.0, 1.0}, {0.0, -3.2}, {0.9, 0.2}, 0.0},
  };
  double worst = 0.0;
  bool ok = true;
  for (const Case& c : cases) {
    Model m = build_model(ModelSpec{{}, 2, {2}, Variant::plain}, 1);
    m.parameter("head_z.weight").value = Tensor(Shape{2, 2}, c.w);
    m.parameter("head_z.bias").value = Tensor(Shape{2}, c.b);
    const Tensor x = Tensor::vector(c.x);
    const int y = predict_labels(m, x.reshaped({1, 2}))[0], t = 1 - y;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 512; ++i) {
      for (int j = 0; j <= 512; ++j) {
        const double p0 = i / 512.0, p1 = j / 512.0;
        const double zt = c.w[t * 2] * p0 + c.w[t * 2 + 1] * p1 + c.b[t];
        const double zy = c.w[y * 2] * p0 + c.w[y * 2 + 1] * p1 + c.b[y];
        if (zt - zy >= c.kappa) best = std::min(best, std::hypot(p0 - c.x[0], p1 - c.x[1]));
      }
    }
    const AttackResult r = cw_l2(m, x, y, t, c.kappa);
    if (!r.success || !std::isfinite(best)) {
      ok = false;
      continue;
    }
    worst = std::max(worst, r.l2 / best);
    ok = ok && r.l2 <= 1.05 * best;
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 30.0, std::to_string(cases.size()) + " cases, worst l2/grid ratio " +
                                 fmt(worst, 5) + ", " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 4. Black-box direction

Outcome criterion4() {
  Desk& d = desk();
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport r = experiment("blackbox_accuracy", {{"scenario", "blackbox_accuracy"},
                                                  {"models", {{"substitute", d.substitute.string()},
                                                              {"oracle", d.oracle.string()},
                                                              {"defended", d.locked.string()}}},
                                                  {"n", 1000},
                                                  {"seed", 4}});
  bool ok = true;
  std::string detail;
  for (const auto& c : r.json.at("cells")) {
    const double o = c.at("oracle_accuracy"), df = c.at("defended_accuracy");
    ok = ok && df - o >= 0.30;
    detail += c.at("attack").get<std::string>() + " oracle " + fmt(o) + " defended " + fmt(df) +
              " (gap " + fmt(100 * (df - o), 3) + " pts), ";
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 1800.0, detail + "n=1000, " + fmt(secs, 4) + " s"};
}

// ---------------------------------------------------------------------------
// 5. Benign trade-off

Outcome criterion5() {
  Desk& d = desk();
  EvalReport r = experiment("benign_tradeoff", {{"scenario", "benign_tradeoff"},
                                                {"models", {{"oracle", d.oracle.string()},
                                                            {"defended", d.locked.string()}}}});
  const auto& c = r.json.at("cells").at(0);
  const double drop = c.at("accuracy_drop"), mis = c.at("misdetection_rate");
  return {drop <= 0.025 && mis <= 0.01,
          "oracle " + fmt(c.at("oracle_accuracy")) + " defended " + fmt(c.at("defended_accuracy")) +
              " drop " + fmt(100 * drop, 3) + " pts, misdetection " + fmt(100 * mis, 3) + "% over " +
              std::to_string(c.at("n").get<std::size_t>()) + " test images"};
}

// ---------------------------------------------------------------------------
// 6. Detection

Outcome criterion6() {
  Desk& d = desk();
  EvalReport r = experiment("detection_pr", {{"scenario", "detection_pr"},
                                             {"models", {{"substitute", d.substitute.string()},
                                                         {"defended", d.locked.string()}}},
                                             {"kappas", {0, 20, 40}},
                                             {"n", 100},
                                             {"seed", 6}});
  bool ok = true;
  double pmin = 1, pmax = 0, rmin = 1, rmax = 0;
  std::string detail;
  for (const auto& c : r.json.at("cells")) {
    if (c.at("precision").is_null()) {
      ok = false;
      detail += "kappa " + fmt(c.at("kappa")) + " precision undefined, ";
      continue;
    }
    const double p = c.at("precision"), rc = c.at("recall");
    ok = ok && p >= 0.90 && rc >= 0.75;
    pmin = std::min(pmin, p), pmax = std::max(pmax, p);
    rmin = std::min(rmin, rc), rmax = std::max(rmax, rc);
    detail += "kappa " + fmt(c.at("kappa")) + " P " + fmt(p) + " R " + fmt(rc) + " (" +
              std::to_string(c.at("crafted").get<std::size_t>()) + " adv), ";
  }
  ok = ok && pmax - pmin < 0.15 && rmax - rmin < 0.15;
  return {ok, detail + "spread P " + fmt(100 * (pmax - pmin), 3) + " R " + fmt(100 * (rmax - rmin), 3) + " pts"};
}

// ---------------------------------------------------------------------------
// 7. Grey-box generation

Outcome criterion7() {
  Desk& d = desk();
  json kappas = json::array();
  for (int k = 0; k <= 40; k += 5) kappas.push_back(k);
  EvalReport locked = experiment("greybox_locked", {{"scenario", "greybox_generation"},
                                                    {"models", {{"defended", d.locked.string()}}},
                                                    {"kappas", kappas},
                                                    {"n", 100},
                                                    {"seed", 7}});
  EvalReport nolock = experiment("greybox_nolock", {{"scenario", "greybox_generation"},
                                                    {"models", {{"defended", d.nolock.string()}}},
                                                    {"kappas", {0}},
                                                    {"n", 100},
                                                    {"seed", 7}});
  bool ok = true;
  std::string t_rates, n_rates;
  for (const auto& c : locked.json.at("cells")) {
    const double k = c.at("kappa"), rate = c.at("rate");
    if (c.at("mode") == "targeted") {
      ok = ok && rate == 0.0;
      t_rates += fmt(rate, 3) + " ";
    } else {
      ok = ok && (k == 0.0 ? rate <= 0.10 : rate == 0.0);
      n_rates += fmt(rate, 3) + " ";
    }
  }
  std::string nl;
  for (const auto& c : nolock.json.at("cells")) {
    const double rate = c.at("rate");
    ok = ok && rate >= 0.80;
    nl += c.at("mode").get<std::string>() + " " + fmt(rate, 3) + " ";
  }
  return {ok, "locked targeted [" + t_rates + "] nontargeted [" + n_rates +
                  "] for kappa 0..40 step 5; nolock kappa 0: " + nl};
}

// ---------------------------------------------------------------------------
// 8. Transfer sweep

Outcome criterion8() {
  Desk& d = desk();
  EvalReport r = experiment("transfer_sweep", {{"scenario", "transfer_sweep"},
                                               {"models", {{"substitute", d.substitute.string()},
                                                           {"oracle", d.oracle.string()},
                                                           {"defended", d.locked.string()}}},
                                               {"kappas", {0, 5, 10, 20, 30, 40}},
                                               {"n", 100},
                                               {"seed", 8}});
  bool ok = true;
  std::string detail;
  for (const auto& c : r.json.at("cells")) {
    const double k = c.at("kappa");
    const double def = c.at("defended").at("rate"), orc = c.at("oracle").at("rate");
    if (k < 10) ok = ok && def < 0.20;
    ok = ok && orc > def;
    detail += "kappa " + fmt(k) + " defended " + fmt(def, 3) + " oracle " + fmt(orc, 3) + ", ";
  }
  return {ok, detail + "n=100"};
}

// ---------------------------------------------------------------------------
// 9. Classmap generality

Outcome criterion9() {
  Desk& d = desk();
  EvalReport r = experiment("classmap_similarity", {{"scenario", "classmap_similarity"},
                                                    {"models", {{"oracle", d.oracle.string()}}},
                                                    {"n_per_class", 100},
                                                    {"seed", 9}});
  bool ok = true;
  std::string detail;
  const auto& cells = r.json.at("cells");
  for (std::size_t i = 1; i < cells.size(); ++i) {
    const double a = cells[i].at("agreement_with_first");
    ok = ok && a >= 0.70;
    detail += cells[i].at("attack").get<std::string>() + " " + fmt(a, 3) + ", ";
  }
  return {ok && cells.size() == 4, detail + "vs fgsm on 1000 train images"};
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small fixed-seed pipeline: train, encode, defend, attack, evaluate.
json mini_pipeline(const fs::path& dir) {
  fs::create_directories(dir);
  const DatasetPair data = load_dataset_dir(CMTD_DATA_DIR);
  const Dataset train = make_desk_subset(data.train, 20, 5);
  Model oracle = build_model(presets::desk_oracle(), 5);
  train_plain(oracle, train, 1, 5);
  save_weights(oracle, dir / "oracle.cmtd");
  Model sub = build_model(presets::desk_substitute(), 6);
  train_plain(sub, train, 1, 6);
  save_weights(sub, dir / "sub.cmtd");
  const Classmap cm = build_classmap(oracle, train, 0.1, 5);
  save_classmap(cm, dir / "cm.json");
  Model def = build_model(presets::desk_oracle(Variant::defended_locked), 5);
  multitask_train(def, train, cm, {}, 0.1, 1, 5);
  save_weights(def, dir / "def.cmtd");
  AttackConfig igs;
  igs.kind = AttackKind::igs;
  igs.igs_ascent = true;
  save_batch(batch_attack(sub, data.test.head(40), igs, 5), dir / "igs.cmtb");

  json out;
  const json models = {{"oracle", (dir / "oracle.cmtd").string()},
                       {"substitute", (dir / "sub.cmtd").string()},
                       {"defended", (dir / "def.cmtd").string()}};
  for (const char* s : {"blackbox_accuracy", "transfer_sweep", "benign_tradeoff"}) {
    json cfg = {{"scenario", s},       {"data", CMTD_DATA_DIR}, {"models", models},
                {"classmap", (dir / "cm.json").string()},       {"kappas", {0, 20}},
                {"n", 10},             {"seed", 5},
                {"cw", {{"max_iterations", 100}, {"c_search_steps", 3}}}};
    if (std::string(s) == "blackbox_accuracy") cfg["attacks"] = {{{"kind", "fgsm"}}, {{"kind", "jsma"}, {"jsma_theta", 1.0}}};
    EvalReport r = run_experiment(parse_experiment(cfg));
    r.json.erase("runtime_seconds");
    r.json.erase("config");  // echoes the per-run directory
    out[s] = r.json;
  }
  return out;
}

Outcome criterion10() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = cache_dir() / "determinism";
  fs::remove_all(root);
  const json a = mini_pipeline(root / "a");
  const json b = mini_pipeline(root / "b");
  std::vector<std::string> problems;
  if (a != b) problems.push_back("reports differ");
  for (const char* f : {"oracle.cmtd", "sub.cmtd", "def.cmtd", "cm.json", "igs.cmtb"}) {
    if (slurp(root / "a" / f) != slurp(root / "b" / f)) problems.push_back(std::string(f) + " differs");
  }
  // Round trips: load then save must reproduce the file byte for byte.
  const Model m = load_weights(root / "a" / "def.cmtd");
  save_weights(m, root / "a" / "def2.cmtd", load_weights_with_manifest(root / "a" / "def.cmtd").manifest.value("training", json::object()));
  const Model m2 = load_weights(root / "a" / "def2.cmtd");
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    if (!(m.parameters()[i].value == m2.parameters()[i].value)) problems.push_back("weights not bit-exact");
  }
  const DatasetPair data = load_dataset_dir(CMTD_DATA_DIR);
  const Tensor x = data.test.images.rows(0, 16);
  if (!(predict_logits(m, x) == predict_logits(load_weights(root / "a" / "def.cmtd"), x)))
    problems.push_back("reloaded forward differs");
  const AdversarialBatch batch = load_batch(root / "a" / "igs.cmtb");
  save_batch(batch, root / "a" / "igs2.cmtb");
  if (slurp(root / "a" / "igs.cmtb") != slurp(root / "a" / "igs2.cmtb")) problems.push_back("batch not bit-exact");
  const double secs = seconds_since(t0);
  std::string detail = "two fixed-seed pipeline runs, 3 reports, 5 artefacts, weight and batch round trips, " + fmt(secs, 3) + " s";
  if (!problems.empty()) detail += ", " + problems.front();
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  const std::vector<std::function<Outcome()>> criteria = {
      criterion1, criterion2, criterion3, criterion4, criterion5,
      criterion6, criterion7, criterion8, criterion9, criterion10};
  const char* names[] = {"gradient oracle",      "attack soundness",   "cw optimality",
                         "black-box direction",  "benign trade-off",   "detection",
                         "grey-box generation",  "transfer sweep",     "classmap generality",
                         "determinism"};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!wanted.empty() && !wanted.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << names[i]
              << "): " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
