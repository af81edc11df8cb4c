#pragma once

// Layer stacks for the oracle, substitute and defended architectures.
//
// Every model is a convolutional/dense trunk followed by a logits head Z.
// Defended variants grow a second head Z' from the last hidden layer; the
// locked variant additionally routes Z' through the gradient lock unit g
// (dense -> tanh -> dense, frozen) and exposes Z* = Z * g(Z').

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtd/autodiff.hpp"
#include "cmtd/error.hpp"
#include "cmtd/rng.hpp"
#include "cmtd/tensor.hpp"

namespace cmtd {

enum class Variant { plain, defended_nolock, defended_locked };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::plain: return "plain";
    case Variant::defended_nolock: return "defended_nolock";
    case Variant::defended_locked: return "defended_locked";
  }
  return "plain";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "plain") return Variant::plain;
  if (s == "defended_nolock") return Variant::defended_nolock;
  if (s == "defended_locked") return Variant::defended_locked;
  throw ConfigError("unknown model variant '" + std::string(s) + "'");
}

inline bool is_defended(Variant v) { return v != Variant::plain; }

enum class LayerKind { conv, maxpool, dropout, dense };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t units = 0;    // filters (conv) or width (dense)
  std::size_t kernel = 3;   // conv only
  std::size_t padding = 0;  // conv only; 0 = valid
  double rate = 0.0;        // dropout only

  static LayerSpec conv(std::size_t filters, std::size_t kernel = 3, std::size_t padding = 0) {
    return {LayerKind::conv, filters, kernel, padding, 0.0};
  }
  static LayerSpec maxpool() { return {LayerKind::maxpool, 0, 0, 0, 0.0}; }
  static LayerSpec dropout(double rate) { return {LayerKind::dropout, 0, 0, 0, rate}; }
  static LayerSpec dense(std::size_t units) { return {LayerKind::dense, units, 0, 0, 0.0}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::size_t class_count = 10;
  Shape input_shape{1, 28, 28};
  Variant variant = Variant::plain;

  // Same trunk and heads apart from the variant.
  bool same_architecture(const ModelSpec& o) const {
    return layers == o.layers && class_count == o.class_count && input_shape == o.input_shape;
  }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv:
      j = {{"kind", "conv"}, {"filters", l.units}, {"kernel", l.kernel}, {"padding", l.padding}};
      break;
    case LayerKind::maxpool: j = {{"kind", "maxpool"}}; break;
    case LayerKind::dropout: j = {{"kind", "dropout"}, {"rate", l.rate}}; break;
    case LayerKind::dense: j = {{"kind", "dense"}, {"units", l.units}}; break;
  }
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "conv") {
    l = LayerSpec::conv(j.at("filters").get<std::size_t>(), j.value("kernel", std::size_t{3}),
                        j.value("padding", std::size_t{0}));
  } else if (kind == "maxpool") {
    l = LayerSpec::maxpool();
  } else if (kind == "dropout") {
    l = LayerSpec::dropout(j.at("rate").get<double>());
  } else if (kind == "dense") {
    l = LayerSpec::dense(j.at("units").get<std::size_t>());
  } else {
    throw ConfigError("unsupported layer kind '" + kind + "'");
  }
}

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"layers", s.layers},
       {"class_count", s.class_count},
       {"input_shape", s.input_shape},
       {"variant", std::string(variant_name(s.variant))}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  try {
    s.layers = j.at("layers").get<std::vector<LayerSpec>>();
    s.class_count = j.value("class_count", std::size_t{10});
    s.input_shape = j.value("input_shape", Shape{1, 28, 28});
    s.variant = parse_variant(j.value("variant", std::string("plain")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
}

namespace presets {

// CPU-sized stand-in for the oracle column of the reference architecture.
inline ModelSpec desk_oracle(Variant v = Variant::plain) {
  return {{LayerSpec::conv(8), LayerSpec::conv(8), LayerSpec::maxpool(), LayerSpec::dropout(0.2),
           LayerSpec::conv(16), LayerSpec::conv(16), LayerSpec::maxpool(),
           LayerSpec::dropout(0.2), LayerSpec::dense(64), LayerSpec::dropout(0.2)},
          10,
          {1, 28, 28},
          v};
}

// CPU-sized MNIST substitute: two conv blocks and two dense layers, no dropout.
inline ModelSpec desk_substitute() {
  return {{LayerSpec::conv(8), LayerSpec::conv(8), LayerSpec::maxpool(), LayerSpec::conv(16),
           LayerSpec::conv(16), LayerSpec::maxpool(), LayerSpec::dense(64),
           LayerSpec::dense(64)},
          10,
          {1, 28, 28},
          Variant::plain};
}

// Full-size oracle. The third conv block uses same padding so 28x28 inputs
// keep a positive spatial extent.
inline ModelSpec full_oracle(Variant v = Variant::plain, Shape input = {1, 28, 28}) {
  return {{LayerSpec::conv(32), LayerSpec::conv(32), LayerSpec::maxpool(),
           LayerSpec::dropout(0.2), LayerSpec::conv(64), LayerSpec::conv(64),
           LayerSpec::maxpool(), LayerSpec::dropout(0.2), LayerSpec::conv(128, 3, 1),
           LayerSpec::conv(128, 3, 1), LayerSpec::maxpool(), LayerSpec::dropout(0.2),
           LayerSpec::dense(512), LayerSpec::dropout(0.2)},
          10,
          std::move(input),
          v};
}

inline ModelSpec full_substitute_mnist() {
  return {{LayerSpec::conv(32), LayerSpec::conv(32), LayerSpec::maxpool(), LayerSpec::conv(64),
           LayerSpec::conv(64), LayerSpec::maxpool(), LayerSpec::dense(200),
           LayerSpec::dense(200)},
          10,
          {1, 28, 28},
          Variant::plain};
}

inline ModelSpec full_substitute_cifar10() {
  return {{LayerSpec::conv(64), LayerSpec::conv(64), LayerSpec::maxpool(), LayerSpec::conv(128),
           LayerSpec::conv(128), LayerSpec::maxpool(), LayerSpec::dense(256),
           LayerSpec::dense(256)},
          10,
          {3, 32, 32},
          Variant::plain};
}

}  // namespace presets

struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
};

enum class Head { main, z, z_prime, z_star };

inline std::string_view head_name(Head h) {
  switch (h) {
    case Head::main: return "main";
    case Head::z: return "z";
    case Head::z_prime: return "z_prime";
    case Head::z_star: return "z_star";
  }
  return "main";
}

inline Head parse_head(std::string_view s) {
  if (s == "main") return Head::main;
  if (s == "z") return Head::z;
  if (s == "z_prime") return Head::z_prime;
  if (s == "z_star") return Head::z_star;
  throw ConfigError("unknown head '" + std::string(s) + "'");
}

// Test hooks on the lock unit output.
enum class LockHook {
  none,
  force_ones,  // g(Z') replaced by a ones vector, so Z* == Z
  sever,       // g(Z') replaced by a constant equal to its current value
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  LockHook lock_hook = LockHook::none;
};

// Tape handles for one forward pass. Heads absent from the variant hold an
// invalid Var.
struct Heads {
  Var z;
  Var z_prime;
  Var lock;  // g(Z')
  Var z_star;

  Var main() const { return z_star.valid() ? z_star : z; }

  Var get(Head h) const {
    Var v;
    switch (h) {
      case Head::main: v = main(); break;
      case Head::z: v = z; break;
      case Head::z_prime: v = z_prime; break;
      case Head::z_star: v = z_star; break;
    }
    if (!v.valid()) {
      throw ConfigError("model has no '" + std::string(head_name(h)) + "' head");
    }
    return v;
  }
};

class Model {
 public:
  Model() = default;

  const ModelSpec& spec() const { return spec_; }
  Variant variant() const { return spec_.variant; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }
  std::size_t class_count() const { return spec_.class_count; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  Parameter& parameter(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw ConfigError("model has no parameter '" + std::string(name) + "'");
  }
  const Parameter& parameter(std::string_view name) const {
    return const_cast<Model*>(this)->parameter(name);
  }
  bool has_parameter(std::string_view name) const {
    for (const auto& p : params_)
      if (p.name == name) return true;
    return false;
  }

  std::size_t parameter_count(bool include_frozen = true) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (include_frozen || !p.frozen) n += p.value.size();
    return n;
  }

  bool has_head(Head h) const {
    switch (h) {
      case Head::main:
      case Head::z: return true;
      case Head::z_prime: return is_defended(spec_.variant);
      case Head::z_star: return spec_.variant == Variant::defended_locked;
    }
    return false;
  }

  // Puts every parameter on the tape (borrowed, no copy). Frozen parameters
  // never require grad.
  std::vector<Var> bind(Tape& tape, bool trainable) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.borrow(p.value, trainable && !p.frozen));
    return vars;
  }

  // Forward through the trunk and every head of the variant. `x` is batched:
  // (N, C, H, W) for image inputs or (N, D) for flat inputs.
  Heads forward(std::span<const Var> params, Var x, const ForwardOptions& opt = {}) const {
    check_input(x.shape());
    std::size_t pi = 0;
    std::size_t li = 0;
    Var h = x;
    bool flat = spec_.input_shape.size() == 1;
    for (const LayerSpec& layer : spec_.layers) {
      switch (layer.kind) {
        case LayerKind::conv:
          h = relu(conv2d(h, params[pi], params[pi + 1], layer.padding));
          pi += 2;
          break;
        case LayerKind::maxpool: h = maxpool2x2(h); break;
        case LayerKind::dropout:
          h = dropout(h, layer.rate, opt.training, opt.dropout_seed * 1315423911ULL + li);
          break;
        case LayerKind::dense:
          if (!flat) {
            h = flatten(h);
            flat = true;
          }
          h = relu(dense(h, params[pi], params[pi + 1]));
          pi += 2;
          break;
      }
      ++li;
    }
    if (!flat) h = flatten(h);
    Heads out;
    out.z = dense(h, params[pi], params[pi + 1]);
    pi += 2;
    if (is_defended(spec_.variant)) {
      out.z_prime = dense(h, params[pi], params[pi + 1]);
      pi += 2;
    }
    if (spec_.variant == Variant::defended_locked) {
      Var g = dense(tanh(dense(out.z_prime, params[pi], params[pi + 1])), params[pi + 2],
                    params[pi + 3]);
      pi += 4;
      if (opt.lock_hook == LockHook::force_ones) {
        g = x.tape().constant(Tensor(g.shape(), 1.0));
      } else if (opt.lock_hook == LockHook::sever) {
        g = x.tape().constant(g.value());
      }
      out.lock = g;
      out.z_star = mul(out.z, g);
    }
    return out;
  }

  // Shape of the batched input expected by forward().
  Shape batch_shape(std::size_t n) const {
    Shape s{n};
    s.insert(s.end(), spec_.input_shape.begin(), spec_.input_shape.end());
    return s;
  }

  void check_input(const Shape& s) const {
    if (s.size() != spec_.input_shape.size() + 1 ||
        !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), s.begin() + 1)) {
      throw ShapeError("model input: expected (N," + shape_str(spec_.input_shape) +
                       "), got " + shape_str(s));
    }
  }

  // Canonical hex digest of the architecture (layers, heads, input, classes).
  std::string architecture_hash() const { return hash_spec(spec_); }

  static std::string hash_spec(const ModelSpec& spec) {
    const std::string canon = nlohmann::json(spec).dump();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(canon.data(), canon.size())));
    return buf;
  }

 private:
  friend Model build_model(const ModelSpec& spec, std::uint64_t seed);
  friend Model skeleton_model(const ModelSpec& spec);

  ModelSpec spec_;
  std::uint64_t seed_ = 0;
  std::vector<Parameter> params_;
};

namespace detail {

struct ParamShape {
  std::string name;
  Shape shape;
  bool frozen;
  double init_limit;  // 0 => zeros
};

// Walks the spec, validating it and listing parameter shapes in forward order.
inline std::vector<ParamShape> parameter_layout(const ModelSpec& spec) {
  if (spec.class_count < 1) throw ConfigError("model spec: class_count must be >= 1");
  if (spec.input_shape.size() != 1 && spec.input_shape.size() != 3) {
    throw ConfigError("model spec: input_shape must be [D] or [C,H,W]");
  }
  if (is_defended(spec.variant) && spec.class_count < 2) {
    throw ConfigError("model spec: defended variants need at least 2 classes");
  }
  std::vector<ParamShape> out;
  Shape cur = spec.input_shape;
  std::size_t conv_i = 0, dense_i = 0;
  for (const LayerSpec& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::conv: {
        if (cur.size() != 3) throw ConfigError("model spec: conv layer after flattening");
        if (l.units == 0 || l.kernel == 0) throw ConfigError("model spec: empty conv layer");
        if (cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) {
          throw ConfigError("model spec: conv kernel larger than feature map " + shape_str(cur));
        }
        const std::size_t fan_in = cur[0] * l.kernel * l.kernel;
        const std::string n = "conv" + std::to_string(++conv_i);
        out.push_back({n + ".weight", {l.units, cur[0], l.kernel, l.kernel}, false,
                       std::sqrt(6.0 / fan_in)});
        out.push_back({n + ".bias", {l.units}, false, 0.0});
        cur = {l.units, cur[1] + 2 * l.padding - l.kernel + 1,
               cur[2] + 2 * l.padding - l.kernel + 1};
        break;
      }
      case LayerKind::maxpool:
        if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) {
          throw ConfigError("model spec: maxpool on feature map " + shape_str(cur));
        }
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::dropout:
        if (l.rate < 0.0 || l.rate >= 1.0) throw ConfigError("model spec: dropout rate out of [0,1)");
        break;
      case LayerKind::dense: {
        if (l.units == 0) throw ConfigError("model spec: empty dense layer");
        const std::size_t fan_in = shape_size(cur);
        const std::string n = "dense" + std::to_string(++dense_i);
        out.push_back({n + ".weight", {l.units, fan_in}, false, std::sqrt(6.0 / fan_in)});
        out.push_back({n + ".bias", {l.units}, false, 0.0});
        cur = {l.units};
        break;
      }
    }
  }
  const std::size_t feat = shape_size(cur);
  const std::size_t k = spec.class_count;
  out.push_back({"head_z.weight", {k, feat}, false, std::sqrt(3.0 / feat)});
  out.push_back({"head_z.bias", {k}, false, 0.0});
  if (is_defended(spec.variant)) {
    out.push_back({"head_zp.weight", {k, feat}, false, std::sqrt(3.0 / feat)});
    out.push_back({"head_zp.bias", {k}, false, 0.0});
  }
  if (spec.variant == Variant::defended_locked) {
    out.push_back({"lock.fc1.weight", {k, k}, true, 0.5});
    out.push_back({"lock.fc1.bias", {k}, true, 0.5});
    out.push_back({"lock.fc2.weight", {k, k}, true, 0.5});
    out.push_back({"lock.fc2.bias", {k}, true, 0.5});
  }
  return out;
}

}  // namespace detail

// Allocates zero-filled parameters for `spec` (used by the weight loader).
inline Model skeleton_model(const ModelSpec& spec) {
  Model m;
  m.spec_ = spec;
  for (const auto& p : detail::parameter_layout(spec)) {
    m.params_.push_back({p.name, Tensor(p.shape), p.frozen});
  }
  return m;
}

// Seeded initialisation: fan-in scaled uniform for trainable weights, zero
// biases, uniform(-0.5, 0.5) for every (frozen) lock-unit parameter.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  Model m;
  m.spec_ = spec;
  m.seed_ = seed;
  SplitMix64 rng(seed);
  for (const auto& p : detail::parameter_layout(spec)) {
    Tensor t(p.shape);
    if (p.init_limit > 0.0) {
      for (double& v : t.data()) v = rng.uniform(-p.init_limit, p.init_limit);
    }
    m.params_.push_back({p.name, std::move(t), p.frozen});
  }
  return m;
}

// Inference-mode head values for a batch.
struct HeadValues {
  Tensor z;
  std::optional<Tensor> z_prime;
  std::optional<Tensor> z_star;

  const Tensor& main() const { return z_star ? *z_star : z; }

  const Tensor& get(Head h) const {
    switch (h) {
      case Head::main: return main();
      case Head::z: return z;
      case Head::z_prime:
        if (!z_prime) throw ConfigError("model has no 'z_prime' head");
        return *z_prime;
      case Head::z_star:
        if (!z_star) throw ConfigError("model has no 'z_star' head");
        return *z_star;
    }
    return z;
  }
};

inline HeadValues forward_heads(const Model& model, const Tensor& x,
                                const ForwardOptions& opt = {}) {
  Tape tape;
  auto params = model.bind(tape, false);
  Heads h = model.forward(params, tape.borrow(x, false), opt);
  HeadValues out{h.z.value(), std::nullopt, std::nullopt};
  if (h.z_prime.valid()) out.z_prime = h.z_prime.value();
  if (h.z_star.valid()) out.z_star = h.z_star.value();
  return out;
}

// Main-head logits for a batch, evaluated in chunks to bound memory.
inline Tensor predict_logits(const Model& model, const Tensor& x, Head head = Head::main,
                             std::size_t chunk = 256) {
  const std::size_t n = x.dim(0);
  Tensor out(Shape{n, model.class_count()});
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    HeadValues hv = forward_heads(model, x.rows(b, e));
    const Tensor& z = hv.get(head);
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + b * model.class_count());
  }
  return out;
}

inline std::vector<int> predict_labels(const Model& model, const Tensor& x,
                                       Head head = Head::main) {
  Tensor z = predict_logits(model, x, head);
  std::vector<int> out(z.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = row_argmax(z, i);
  return out;
}

enum class SubstituteMode {
  normal,      // freshly initialised substitute, trained separately by the attacker
  worst_case,  // substitute shares the oracle's parameters
};

// Builds the attacker's substitute. Worst case copies every parameter the
// substitute spec needs from `oracle`; the two specs must describe the same
// trunk, input and class count (the variant may drop heads, e.g. a plain
// copy of a defended oracle keeps only Z).
inline Model clone_as_substitute(const Model& oracle, const ModelSpec& substitute_spec,
                                 SubstituteMode mode, std::uint64_t seed) {
  if (mode == SubstituteMode::normal) return build_model(substitute_spec, seed);
  if (!oracle.spec().same_architecture(substitute_spec)) {
    throw ConfigError("worst-case substitute: spec does not match the oracle architecture");
  }
  Model sub = build_model(substitute_spec, oracle.seed());
  for (auto& p : sub.parameters()) {
    if (!oracle.has_parameter(p.name)) {
      throw ConfigError("worst-case substitute: oracle lacks parameter '" + p.name + "'");
    }
    p.value = oracle.parameter(p.name).value;
  }
  return sub;
}

}  // namespace cmtd
