#pragma once

// Dataset ingestion: MNIST IDX (optionally gzip-compressed), CIFAR-10 binary
// batches, and seeded class-balanced subsetting.

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cmtd/error.hpp"
#include "cmtd/rng.hpp"
#include "cmtd/tensor.hpp"

namespace cmtd {

struct Provenance {
  std::vector<std::string> source_hashes;  // FNV-1a of each decompressed source file
  std::optional<std::uint64_t> subset_seed;
};

// Images (N, C, H, W) in [0,1] with integer labels.
struct Dataset {
  Tensor images{Shape{0, 1, 28, 28}};
  std::vector<int> labels;
  std::string split;
  Provenance provenance;
  std::size_t class_count = 10;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  Shape example_shape() const {
    return Shape(images.shape().begin() + 1, images.shape().end());
  }

  // Throws unless every pixel lies in [0,1], every label is in range and the
  // counts agree.
  void validate() const {
    if (images.rank() < 2 || images.dim(0) != labels.size()) {
      throw FormatError("dataset: " + std::to_string(labels.size()) + " labels for images " +
                        shape_str(images.shape()));
    }
    for (double v : images.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw FormatError("dataset: pixel outside [0,1]");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= class_count) {
        throw FormatError("dataset: label " + std::to_string(l) + " out of range");
      }
    }
  }

  Dataset subset(std::span<const std::size_t> index) const {
    Dataset d;
    d.images = images.gather_rows(index);
    d.labels.reserve(index.size());
    for (std::size_t i : index) d.labels.push_back(labels.at(i));
    d.split = split;
    d.provenance = provenance;
    d.class_count = class_count;
    return d;
  }

  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(idx);
  }
};

namespace detail {

// Reads a whole file, transparently inflating gzip content.
inline std::vector<unsigned char> read_maybe_gz(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf;
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  int err = 0;
  const char* msg = gzerror(f, &err);
  const std::string err_msg = msg ? msg : "";
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
    throw FormatError("'" + path.string() + "': decompression failed: " + err_msg);
  }
  return out;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

inline std::string hash_hex(const std::vector<unsigned char>& b) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(b.data(), b.size())));
  return buf;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

inline Dataset load_mnist_idx(const std::filesystem::path& image_path,
                              const std::filesystem::path& label_path) {
  const auto img = detail::read_maybe_gz(image_path);
  const auto lab = detail::read_maybe_gz(label_path);
  const std::string ip = image_path.string(), lp = label_path.string();

  if (img.size() < 16) {
    throw FormatError(ip + ": truncated header at offset " + std::to_string(img.size()));
  }
  if (detail::be32(img, 0) != kIdxImageMagic) {
    throw FormatError(ip + ": bad magic number at offset 0 (expected 0x00000803)");
  }
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8),
                    cols = detail::be32(img, 12);
  const std::size_t need = 16 + n * rows * cols;
  if (img.size() < need) {
    throw FormatError(ip + ": truncated at offset " + std::to_string(img.size()) +
                      ", expected " + std::to_string(need) + " bytes");
  }
  if (lab.size() < 8) {
    throw FormatError(lp + ": truncated header at offset " + std::to_string(lab.size()));
  }
  if (detail::be32(lab, 0) != kIdxLabelMagic) {
    throw FormatError(lp + ": bad magic number at offset 0 (expected 0x00000801)");
  }
  const std::size_t nl = detail::be32(lab, 4);
  if (nl != n) {
    throw FormatError(lp + ": dimension mismatch at offset 4: " + std::to_string(nl) +
                      " labels for " + std::to_string(n) + " images");
  }
  if (lab.size() < 8 + n) {
    throw FormatError(lp + ": truncated at offset " + std::to_string(lab.size()) +
                      ", expected " + std::to_string(8 + n) + " bytes");
  }

  Dataset d;
  d.images = Tensor(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.images[i] = img[16 + i] / 255.0;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    if (d.labels[i] >= 10) {
      throw FormatError(lp + ": label " + std::to_string(d.labels[i]) + " at offset " +
                        std::to_string(8 + i) + " out of range");
    }
  }
  d.provenance.source_hashes = {detail::hash_hex(img), detail::hash_hex(lab)};
  return d;
}

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

// Each record is one label byte followed by 1024 R, 1024 G and 1024 B bytes.
inline Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& paths) {
  std::vector<unsigned char> all;
  Dataset d;
  for (const auto& p : paths) {
    auto bytes = detail::read_maybe_gz(p);
    if (bytes.size() % kCifarRecord != 0) {
      throw FormatError(p.string() + ": length " + std::to_string(bytes.size()) +
                        " is not a multiple of " + std::to_string(kCifarRecord));
    }
    if (bytes.empty()) std::cerr << "warning: " << p.string() << " is empty\n";
    d.provenance.source_hashes.push_back(detail::hash_hex(bytes));
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  const std::size_t n = all.size() / kCifarRecord;
  d.images = Tensor(Shape{n, 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = all.data() + i * kCifarRecord;
    if (rec[0] >= 10) {
      throw FormatError("cifar10: label " + std::to_string(rec[0]) + " at offset " +
                        std::to_string(i * kCifarRecord) + " out of range");
    }
    d.labels[i] = rec[0];
    for (std::size_t j = 0; j < 3072; ++j) d.images[i * 3072 + j] = rec[1 + j] / 255.0;
  }
  return d;
}

// Picks n_per_class examples of every class. Per class, candidate indices
// (in dataset order) are shuffled with a SplitMix64 stream seeded from
// `seed` and the class id; the first n_per_class are kept. The result is
// ordered by class, then by shuffled position.
inline Dataset make_desk_subset(const Dataset& data, std::size_t n_per_class,
                                std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(data.class_count);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < data.class_count; ++c) {
    if (by_class[c].size() < n_per_class) {
      throw ConfigError("desk subset: class " + std::to_string(c) + " has only " +
                        std::to_string(by_class[c].size()) + " examples, need " +
                        std::to_string(n_per_class));
    }
    SplitMix64 rng(seed ^ (0x5851F42D4C957F2DULL * (c + 1)));
    rng.shuffle(by_class[c]);
    picked.insert(picked.end(), by_class[c].begin(), by_class[c].begin() + n_per_class);
  }
  Dataset out = data.subset(picked);
  out.provenance.subset_seed = seed;
  return out;
}

// Deterministic interleaving of a dataset (seeded permutation).
inline Dataset shuffled(const Dataset& data, std::uint64_t seed) {
  SplitMix64 rng(seed);
  auto idx = rng.permutation(data.size());
  return data.subset(idx);
}

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// Loads a dataset directory: MNIST IDX files (train-*/t10k-*, optionally .gz)
// or CIFAR-10 binaries (data_batch_*.bin, test_batch.bin).
inline DatasetPair load_dataset_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  auto find = [&](const std::string& stem) -> std::optional<fs::path> {
    for (const auto& cand : {dir / stem, dir / (stem + ".gz")})
      if (fs::exists(cand)) return cand;
    return std::nullopt;
  };
  auto ti = find("train-images-idx3-ubyte"), tl = find("train-labels-idx1-ubyte");
  auto si = find("t10k-images-idx3-ubyte"), sl = find("t10k-labels-idx1-ubyte");
  if (ti && tl && si && sl) {
    DatasetPair p{load_mnist_idx(*ti, *tl), load_mnist_idx(*si, *sl)};
    p.train.split = "train";
    p.test.split = "test";
    return p;
  }
  std::vector<fs::path> batches;
  for (int i = 1; i <= 5; ++i) {
    fs::path b = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (fs::exists(b)) batches.push_back(b);
  }
  if (!batches.empty() && fs::exists(dir / "test_batch.bin")) {
    DatasetPair p{load_cifar10_bin(batches), load_cifar10_bin({dir / "test_batch.bin"})};
    p.train.split = "train";
    p.test.split = "test";
    return p;
  }
  throw ConfigError("no MNIST or CIFAR-10 files found in '" + dir.string() + "'");
}

}  // namespace cmtd
