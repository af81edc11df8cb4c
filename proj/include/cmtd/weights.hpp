#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "cmtd/container.hpp"
#include "cmtd/model.hpp"

namespace cmtd {

inline constexpr std::string_view kWeightMagic = "CMTD";
inline constexpr std::uint16_t kWeightVersion = 1;

// FNV-1a over the architecture hash and every parameter's name and bytes.
inline std::string weights_hash(const Model& model) {
  const std::string arch = model.architecture_hash();
  std::uint64_t h = fnv1a(arch.data(), arch.size());
  for (const auto& p : model.parameters()) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.value.data().data(), p.value.size() * sizeof(double), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Manifest: architecture hash, seed, variant, class count, the full spec
// and free-form training metadata.
inline void save_weights(const Model& model, const std::filesystem::path& path,
                         const nlohmann::json& training_meta = nlohmann::json::object()) {
  Container c;
  c.version = kWeightVersion;
  c.manifest = {{"architecture_hash", model.architecture_hash()},
                {"seed", model.seed()},
                {"variant", std::string(variant_name(model.variant()))},
                {"class_count", model.class_count()},
                {"spec", model.spec()},
                {"training", training_meta}};
  for (const auto& p : model.parameters()) c.records.push_back({p.name, p.value});
  write_container(path, kWeightMagic, c);
}

struct LoadedModel {
  Model model;
  nlohmann::json manifest;
};

// Loads and validates a weight file. The stored architecture hash must match
// the hash recomputed from the stored spec and, when given, `expected`.
inline LoadedModel load_weights_with_manifest(const std::filesystem::path& path,
                                              const std::optional<ModelSpec>& expected = {}) {
  Container c = read_container(path, kWeightMagic, kWeightVersion);
  ModelSpec spec;
  try {
    spec = c.manifest.at("spec").get<ModelSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": manifest lacks a valid spec: " + e.what());
  }
  const std::string stored = c.manifest.value("architecture_hash", std::string());
  if (stored != Model::hash_spec(spec)) {
    throw FormatError(path.string() + ": architecture hash mismatch (manifest " + stored +
                      ", spec " + Model::hash_spec(spec) + ")");
  }
  if (expected && Model::hash_spec(*expected) != stored) {
    throw FormatError(path.string() + ": architecture hash " + stored +
                      " does not match expected " + Model::hash_spec(*expected));
  }
  Model m = skeleton_model(spec);
  for (auto& p : m.parameters()) {
    const Tensor& t = c.record(p.name);
    if (t.shape() != p.value.shape()) {
      throw FormatError(path.string() + ": parameter '" + p.name + "' has shape " +
                        shape_str(t.shape()) + ", expected " + shape_str(p.value.shape()));
    }
    p.value = t;
  }
  m.set_seed(c.manifest.value("seed", std::uint64_t{0}));
  return {std::move(m), std::move(c.manifest)};
}

inline Model load_weights(const std::filesystem::path& path,
                          const std::optional<ModelSpec>& expected = {}) {
  return load_weights_with_manifest(path, expected).model;
}

}  // namespace cmtd
