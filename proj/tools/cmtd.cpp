// cmtd command-line front end.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cmtd/cmtd.hpp"

namespace fs = std::filesystem;
using namespace cmtd;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
}

// A preset name or a path to a ModelSpec JSON file.
ModelSpec resolve_spec(const std::string& s) {
  if (s == "desk_oracle") return presets::desk_oracle();
  if (s == "desk_substitute") return presets::desk_substitute();
  if (s == "full_oracle") return presets::full_oracle();
  if (s == "full_substitute_mnist") return presets::full_substitute_mnist();
  if (s == "full_substitute_cifar10") return presets::full_substitute_cifar10();
  require_file(s, "model spec");
  try {
    return read_json(s).get<ModelSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(s + ": " + e.what());
  }
}

struct TrainArgs {
  std::string spec = "desk_oracle";
  fs::path data, out, classmap;
  std::string variant;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  double eps_reg = 0.1;
  double alpha = 0.4, beta = 0.4, gamma = 0.2;
};

int run_train(const TrainArgs& a) {
  ModelSpec spec = resolve_spec(a.spec);
  if (!a.variant.empty()) spec.variant = parse_variant(a.variant);
  require_file(a.data, "data directory");
  std::optional<Classmap> cm;
  if (is_defended(spec.variant)) {
    if (a.classmap.empty()) throw ConfigError("train: defended variants need --classmap");
    require_file(a.classmap, "classmap");
    cm = load_classmap(a.classmap);
  }
  LossWeights w{a.alpha, a.beta, a.gamma};
  w.validate();
  OptimizerConfig opt;
  opt.learning_rate = a.lr;
  opt.batch_size = a.batch_size;

  const DatasetPair data = load_dataset_dir(a.data);
  Model model = build_model(spec, a.seed);
  std::vector<EpochMetrics> hist;
  if (cm) {
    hist = multitask_train(model, data.train, *cm, w, a.eps_reg, a.epochs, a.seed, opt, &std::cerr);
  } else {
    hist = train_plain(model, data.train, a.epochs, a.seed, opt, &std::cerr);
  }
  nlohmann::json meta = {{"epochs", a.epochs},
                         {"learning_rate", a.lr},
                         {"batch_size", a.batch_size},
                         {"train_examples", data.train.size()},
                         {"final_loss", hist.empty() ? 0.0 : hist.back().mean_loss},
                         {"test_accuracy", eval_accuracy(model, data.test)}};
  if (cm) {
    meta["classmap"] = *cm;
    meta["loss_weights"] = {{"alpha", w.alpha}, {"beta", w.beta}, {"gamma", w.gamma}};
    meta["eps_reg"] = a.eps_reg;
  }
  save_weights(model, a.out, meta);
  std::cout << "test accuracy " << meta["test_accuracy"].get<double>() << "\n";
  return 0;
}

int run_build_classmap(const fs::path& model_path, const fs::path& data_dir, double eps,
                       std::uint64_t seed, const fs::path& out) {
  require_file(model_path, "weight file");
  require_file(data_dir, "data directory");
  if (!(eps >= 0.0)) throw ConfigError("--epsilon must be >= 0");
  const Model model = load_weights(model_path);
  const DatasetPair data = load_dataset_dir(data_dir);
  const Classmap cm = build_classmap(model, data.train, eps, seed);
  save_classmap(cm, out);
  std::cout << nlohmann::json(cm).dump() << "\n";
  return 0;
}

int run_attack(const fs::path& model_path, const fs::path& config, const fs::path& data_dir,
               const fs::path& out, std::size_t n, std::uint64_t seed) {
  require_file(model_path, "weight file");
  require_file(config, "attack config");
  require_file(data_dir, "data directory");
  AttackConfig cfg;
  try {
    cfg = read_json(config).get<AttackConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(config.string() + ": " + e.what());
  }
  const Model model = load_weights(model_path);
  cfg.validate(model.class_count());
  const DatasetPair data = load_dataset_dir(data_dir);
  const AdversarialBatch b = batch_attack(model, data.test.head(n), cfg, seed);
  save_batch(b, out);
  std::cout << b.attack << ": " << b.success_count() << "/" << b.size() << " succeeded\n";
  return 0;
}

int run_detect(const fs::path& model_path, const fs::path& classmap, const fs::path& batch_path,
               const fs::path& report) {
  require_file(model_path, "weight file");
  require_file(classmap, "classmap");
  require_file(batch_path, "batch file");
  const Model model = load_weights(model_path);
  const Classmap cm = load_classmap(classmap);
  const AdversarialBatch b = load_batch(batch_path);
  const auto adv = detect_batch(model, cm, b.perturbed);
  const auto ben = detect_batch(model, cm, b.originals);
  nlohmann::json verdicts = nlohmann::json::array();
  for (std::size_t i = 0; i < adv.size(); ++i) {
    verdicts.push_back({{"index", i},
                        {"label", b.labels[i]},
                        {"attack_success", static_cast<bool>(b.success[i])},
                        {"accepted", adv[i].accepted},
                        {"predicted", adv[i].predicted},
                        {"auxiliary", adv[i].auxiliary},
                        {"original_accepted", ben[i].accepted}});
  }
  std::size_t rejected = 0, rejected_success = 0, benign_rejected = 0;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    rejected += !adv[i].accepted;
    rejected_success += !adv[i].accepted && b.success[i];
    benign_rejected += !ben[i].accepted;
  }
  nlohmann::json j = {{"toolkit_version", CMTD_VERSION},
                      {"attack", b.attack},
                      {"count", b.size()},
                      {"successful", b.success_count()},
                      {"rejected", rejected},
                      {"rejected_successful", rejected_success},
                      {"originals_rejected", benign_rejected},
                      {"verdicts", verdicts}};
  const std::string s = j.dump(2) + "\n";
  detail::write_file_atomic(report, s.data(), s.size());
  std::cout << rejected << "/" << b.size() << " rejected\n";
  return 0;
}

int run_evaluate(const std::string& scenario, const fs::path& config, const fs::path& out) {
  require_file(config, "experiment config");
  nlohmann::json j = read_json(config);
  if (!scenario.empty()) j["scenario"] = scenario;
  ExperimentConfig cfg = parse_experiment(j, config.parent_path());
  if (!out.empty()) cfg.output = out;
  if (cfg.output.empty()) throw ConfigError("evaluate: no output path (--out)");
  const EvalReport rep = run_experiment(cfg);
  write_report(rep, cfg.output);
  if (!rep.ok) {
    std::cerr << "error: " << rep.json["error"]["stage"].get<std::string>() << ": "
              << rep.json["error"]["message"].get<std::string>() << "\n";
    return 3;
  }
  std::cout << "wrote " << cfg.output.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task adversarial defence toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", CMTD_VERSION);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a plain or defended model");
  train->add_option("--spec", ta.spec, "Preset name or ModelSpec JSON")->capture_default_str();
  train->add_option("--data", ta.data, "Dataset directory")->required();
  train->add_option("--out", ta.out, "Output weight file")->required();
  train->add_option("--variant", ta.variant, "plain|defended_nolock|defended_locked");
  train->add_option("--classmap", ta.classmap, "Classmap JSON (defended variants)");
  train->add_option("--epochs", ta.epochs)->capture_default_str();
  train->add_option("--seed", ta.seed)->capture_default_str();
  train->add_option("--lr", ta.lr)->capture_default_str();
  train->add_option("--batch-size", ta.batch_size)->capture_default_str();
  train->add_option("--eps-reg", ta.eps_reg)->capture_default_str();
  train->add_option("--alpha", ta.alpha)->capture_default_str();
  train->add_option("--beta", ta.beta)->capture_default_str();
  train->add_option("--gamma", ta.gamma)->capture_default_str();

  fs::path cm_model, cm_data, cm_out;
  double cm_eps = 0.1;
  std::uint64_t cm_seed = 0;
  auto* bcm = app.add_subcommand("build-classmap", "Encode robust label pairs from FGSM");
  bcm->add_option("--model", cm_model)->required();
  bcm->add_option("--data", cm_data)->required();
  bcm->add_option("--epsilon", cm_eps)->capture_default_str();
  bcm->add_option("--seed", cm_seed)->capture_default_str();
  bcm->add_option("--out", cm_out)->required();

  fs::path at_model, at_config, at_data, at_out;
  std::size_t at_n = 1000;
  std::uint64_t at_seed = 0;
  auto* attack = app.add_subcommand("attack", "Craft an adversarial batch from the test split");
  attack->add_option("--model", at_model)->required();
  attack->add_option("--config", at_config, "AttackConfig JSON")->required();
  attack->add_option("--data", at_data)->required();
  attack->add_option("--out", at_out)->required();
  attack->add_option("-n,--count", at_n, "Leading test examples to attack")->capture_default_str();
  attack->add_option("--seed", at_seed)->capture_default_str();

  fs::path de_model, de_cm, de_batch, de_report;
  auto* detect = app.add_subcommand("detect", "Run the Classmap detector over a batch");
  detect->add_option("--model", de_model)->required();
  detect->add_option("--classmap", de_cm)->required();
  detect->add_option("--batch", de_batch)->required();
  detect->add_option("--report", de_report)->required();

  std::string ev_scenario;
  fs::path ev_config, ev_out;
  auto* evaluate = app.add_subcommand("evaluate", "Run an experiment scenario");
  evaluate->add_option("--scenario", ev_scenario);
  evaluate->add_option("--config", ev_config)->required();
  evaluate->add_option("--out", ev_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return run_train(ta);
    if (*bcm) return run_build_classmap(cm_model, cm_data, cm_eps, cm_seed, cm_out);
    if (*attack) return run_attack(at_model, at_config, at_data, at_out, at_n, at_seed);
    if (*detect) return run_detect(de_model, de_cm, de_batch, de_report);
    if (*evaluate) return run_evaluate(ev_scenario, ev_config, ev_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
