#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cmtd/autodiff.hpp"
#include "cmtd/data.hpp"
#include "cmtd/model.hpp"

namespace cmtd {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 64;
  double lr_decay = 1.0;  // learning rate multiplier applied after each epoch
};

// Adam over the model's trainable parameters. Frozen parameters keep no state
// and are never written.
class Adam {
 public:
  explicit Adam(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

  // Applies the per-epoch decay.
  void end_epoch() { cfg_.learning_rate *= cfg_.lr_decay; }

  void step(Model& model, const GradientMap& grads, std::span<const Var> param_vars) {
    auto& params = model.parameters();
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.shape());
        v_.emplace_back(p.value.shape());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].frozen) continue;
      const Tensor& g = grads[param_vars[i]];
      auto w = params[i].value.data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] -= cfg_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.epsilon);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

// What a loss builder hands back for one batch.
struct LossOutput {
  Var loss;         // rank-0
  Var main_logits;  // (N, K) on the benign batch, for accuracy
  std::map<std::string, double> terms;
};

// Builds the training loss of one batch on `tape`. `params` are the model
// parameters already bound to the tape; `step_seed` seeds dropout.
using LossBuilder =
    std::function<LossOutput(Tape& tape, const Model& model, std::span<const Var> params,
                             const Tensor& x, std::span<const int> y, std::uint64_t step_seed)>;

// Mean cross-entropy on the main head.
inline LossOutput cross_entropy_loss(Tape& tape, const Model& model, std::span<const Var> params,
                                     const Tensor& x, std::span<const int> y,
                                     std::uint64_t step_seed) {
  ForwardOptions opt{true, step_seed, LockHook::none};
  Heads h = model.forward(params, tape.borrow(x, false), opt);
  Var loss = mean(cross_entropy_with_logits(h.main(), y));
  return {loss, h.main(), {{"ce", loss.value().item()}}};
}

struct EpochMetrics {
  double mean_loss = 0.0;
  double accuracy = 0.0;
  std::size_t batches = 0;
};

// One pass over a seeded shuffle of `data`. Parameters other than frozen ones
// are updated by `opt`.
inline EpochMetrics train_epoch(Model& model, const Dataset& data, const LossBuilder& loss_builder,
                                Adam& opt, std::uint64_t seed, std::size_t epoch = 0) {
  if (data.empty()) throw ConfigError("train_epoch: dataset is empty");
  const std::size_t bs = opt.config().batch_size;
  if (bs == 0) throw ConfigError("train_epoch: batch size must be >= 1");
  SplitMix64 rng(seed ^ (0xA24BAED4963EE407ULL * (epoch + 1)));
  const auto order = rng.permutation(data.size());

  EpochMetrics metrics;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < data.size(); b += bs) {
    const std::size_t e = std::min(data.size(), b + bs);
    std::span<const std::size_t> idx(order.data() + b, e - b);
    const Tensor x = data.images.gather_rows(idx);
    std::vector<int> y;
    y.reserve(idx.size());
    for (std::size_t i : idx) y.push_back(data.labels[i]);

    Tape tape;
    auto params = model.bind(tape, true);
    LossOutput out;
    const std::size_t batch_index = metrics.batches;
    try {
      out = loss_builder(tape, model, params, x, y, rng.next());
    } catch (const NumericError& err) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch_index) + ": " + err.what());
    }
    const double lv = out.loss.value().item();
    if (!std::isfinite(lv)) {
      std::ostringstream os;
      os << "training diverged at epoch " << epoch << ", batch " << batch_index
         << ": loss " << lv;
      for (const auto& [k, v] : out.terms) os << ", " << k << "=" << v;
      throw NumericError(os.str());
    }
    GradientMap grads = tape.backward(out.loss);
    opt.step(model, grads, params);

    const Tensor& z = out.main_logits.value();
    for (std::size_t i = 0; i < y.size(); ++i) correct += row_argmax(z, i) == y[i];
    loss_sum += lv * static_cast<double>(y.size());
    ++metrics.batches;
  }
  metrics.mean_loss = loss_sum / static_cast<double>(data.size());
  metrics.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return metrics;
}

// Plain cross-entropy training for `epochs` passes.
inline std::vector<EpochMetrics> train_plain(Model& model, const Dataset& data, std::size_t epochs,
                                             std::uint64_t seed, OptimizerConfig opt_cfg = {},
                                             std::ostream* log = nullptr) {
  Adam opt(opt_cfg);
  std::vector<EpochMetrics> out;
  for (std::size_t e = 0; e < epochs; ++e) {
    out.push_back(train_epoch(model, data, cross_entropy_loss, opt, seed, e));
    opt.end_epoch();
    if (log) {
      *log << "epoch " << e << " loss " << out.back().mean_loss << " acc "
           << out.back().accuracy << "\n";
    }
  }
  return out;
}

}  // namespace cmtd
