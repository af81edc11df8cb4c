#pragma once

// Persisted adversarial batches ("CMTB" containers).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtd/container.hpp"

namespace cmtd {

inline constexpr std::string_view kBatchMagic = "CMTB";
inline constexpr std::uint16_t kBatchVersion = 1;

struct AdversarialBatch {
  std::string attack;  // opaque on load; unknown names are kept as-is
  nlohmann::json config = nlohmann::json::object();
  Tensor originals{Shape{0, 1, 28, 28}};
  Tensor perturbed{Shape{0, 1, 28, 28}};
  std::vector<int> labels;
  std::vector<int> targets;  // -1 when nontargeted
  std::vector<bool> success;
  std::vector<double> l2;
  std::vector<double> linf;
  std::vector<int> iterations;
  std::vector<double> margin;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  std::size_t success_count() const {
    return static_cast<std::size_t>(std::count(success.begin(), success.end(), true));
  }

  // Rows of the perturbed tensor whose attack succeeded.
  std::vector<std::size_t> successful_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < success.size(); ++i)
      if (success[i]) out.push_back(i);
    return out;
  }
};

struct Distortion {
  double l2 = 0.0;
  double linf = 0.0;
};

inline Distortion distortion(std::span<const double> a, std::span<const double> b) {
  Distortion d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = b[i] - a[i];
    d.l2 += diff * diff;
    d.linf = std::max(d.linf, std::abs(diff));
  }
  d.l2 = std::sqrt(d.l2);
  return d;
}

// Per-row L2 and L-infinity distances between two equally shaped batches.
inline std::vector<Distortion> row_distortions(const Tensor& originals, const Tensor& perturbed) {
  if (originals.shape() != perturbed.shape()) {
    throw ShapeError("distortion: shapes " + shape_str(originals.shape()) + " and " +
                     shape_str(perturbed.shape()) + " differ");
  }
  std::vector<Distortion> out;
  if (originals.rank() == 0) return out;
  const std::size_t n = originals.dim(0), d = originals.row_size();
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(distortion(originals.data().subspan(i * d, d),
                             perturbed.data().subspan(i * d, d)));
  }
  return out;
}

namespace detail {

template <typename T>
Tensor to_tensor(const std::vector<T>& v) {
  std::vector<double> d(v.begin(), v.end());
  const std::size_t n = d.size();
  return Tensor(Shape{n}, std::move(d));
}

inline void check_count(const Tensor& t, std::size_t n, const std::string& name,
                        const std::string& path) {
  if (t.rank() != 1 || t.size() != n) {
    throw FormatError(path + ": record '" + name + "' has shape " + shape_str(t.shape()) +
                      ", expected (" + std::to_string(n) + ")");
  }
}

}  // namespace detail

inline void save_batch(const AdversarialBatch& b, const std::filesystem::path& path) {
  const std::size_t n = b.size();
  if (b.originals.shape() != b.perturbed.shape() || b.originals.rank() == 0 ||
      b.originals.dim(0) != n || b.targets.size() != n || b.success.size() != n ||
      b.l2.size() != n || b.linf.size() != n || b.iterations.size() != n ||
      b.margin.size() != n) {
    throw ShapeError("save_batch: inconsistent field sizes");
  }
  Container c;
  c.version = kBatchVersion;
  c.manifest = {{"attack", b.attack}, {"config", b.config}, {"count", n}};
  c.records = {{"originals", b.originals},
               {"perturbed", b.perturbed},
               {"labels", detail::to_tensor(b.labels)},
               {"targets", detail::to_tensor(b.targets)},
               {"success", detail::to_tensor(b.success)},
               {"l2", detail::to_tensor(b.l2)},
               {"linf", detail::to_tensor(b.linf)},
               {"iterations", detail::to_tensor(b.iterations)},
               {"margin", detail::to_tensor(b.margin)}};
  write_container(path, kBatchMagic, c);
}

inline AdversarialBatch load_batch(const std::filesystem::path& path) {
  Container c = read_container(path, kBatchMagic, kBatchVersion);
  const std::string p = path.string();
  AdversarialBatch b;
  b.attack = c.manifest.value("attack", std::string());
  b.config = c.manifest.value("config", nlohmann::json::object());
  b.originals = c.record("originals");
  b.perturbed = c.record("perturbed");
  if (b.originals.shape() != b.perturbed.shape() || b.originals.rank() == 0) {
    throw FormatError(p + ": originals " + shape_str(b.originals.shape()) + " and perturbed " +
                      shape_str(b.perturbed.shape()) + " disagree");
  }
  const std::size_t n = b.originals.dim(0);
  auto ints = [&](const std::string& name) {
    const Tensor& t = c.record(name);
    detail::check_count(t, n, name, p);
    std::vector<int> v;
    for (double x : t.data()) v.push_back(static_cast<int>(x));
    return v;
  };
  auto reals = [&](const std::string& name) {
    const Tensor& t = c.record(name);
    detail::check_count(t, n, name, p);
    return t.values();
  };
  b.labels = ints("labels");
  b.targets = ints("targets");
  for (int s : ints("success")) b.success.push_back(s != 0);
  b.l2 = reals("l2");
  b.linf = reals("linf");
  b.iterations = ints("iterations");
  b.margin = reals("margin");
  return b;
}

}  // namespace cmtd
