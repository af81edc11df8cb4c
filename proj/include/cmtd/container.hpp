#pragma once

// Binary container shared by weight files ("CMTD") and adversarial batch
// files ("CMTB"). All integers and payloads are little-endian:
//
//   magic        4 bytes
//   version      u16
//   manifest_len u32
//   manifest     manifest_len bytes of UTF-8 JSON
//   records...   until end of file, each:
//     name_len u16, name, rank u8, extents u32 x rank, payload f64 x prod(extents)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtd/error.hpp"
#include "cmtd/tensor.hpp"

namespace cmtd {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Container {
  std::uint16_t version = 1;
  nlohmann::json manifest;
  std::vector<NamedTensor> records;

  const Tensor& record(std::string_view name) const {
    for (const auto& r : records)
      if (r.name == name) return r.value;
    throw FormatError("container: missing record '" + std::string(name) + "'");
  }
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double d) { le(std::bit_cast<std::uint64_t>(d)); }
  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<unsigned char> data, std::string source)
      : data_(std::move(data)), source_(std::move(source)) {}

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t offset() const { return pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(source_ + ": truncated at byte " + std::to_string(data_.size()) +
                        " while reading " + std::string(what) + " at offset " +
                        std::to_string(pos_));
    }
  }
  template <typename T>
  T le(std::string_view what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64(std::string_view what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::vector<unsigned char> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Writes to a sibling temporary and renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const void* data,
                              std::size_t size) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::vector<unsigned char> encode_container(std::string_view magic, const Container& c) {
  if (magic.size() != 4) throw ConfigError("container magic must be 4 bytes");
  detail::ByteWriter w;
  w.bytes(magic.data(), 4);
  w.le<std::uint16_t>(c.version);
  const std::string manifest = c.manifest.dump();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(manifest.size()));
  w.bytes(manifest.data(), manifest.size());
  for (const auto& r : c.records) {
    if (r.name.size() > 0xFFFF) throw ConfigError("container: record name too long");
    w.le<std::uint16_t>(static_cast<std::uint16_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(r.value.rank()));
    for (std::size_t e : r.value.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (double v : r.value.data()) w.f64(v);
  }
  return w.buffer();
}

inline void write_container(const std::filesystem::path& path, std::string_view magic,
                            const Container& c) {
  const auto bytes = encode_container(magic, c);
  detail::write_file_atomic(path, bytes.data(), bytes.size());
}

// Reads a container, rejecting a wrong magic or a version other than
// `expected_version`. Truncation errors carry the byte offset.
inline Container read_container(const std::filesystem::path& path, std::string_view magic,
                                std::uint16_t expected_version) {
  detail::ByteReader r(detail::read_file(path), path.string());
  Container c;
  if (r.str(4, "magic") != magic) {
    throw FormatError(path.string() + ": bad magic, expected '" + std::string(magic) + "'");
  }
  c.version = r.le<std::uint16_t>("version");
  if (c.version != expected_version) {
    throw FormatError(path.string() + ": unsupported format version " +
                      std::to_string(c.version) + " (expected " +
                      std::to_string(expected_version) + ")");
  }
  const auto mlen = r.le<std::uint32_t>("manifest length");
  try {
    c.manifest = nlohmann::json::parse(r.str(mlen, "manifest"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": manifest is not valid JSON: " + e.what());
  }
  while (!r.at_end()) {
    NamedTensor rec;
    const auto nlen = r.le<std::uint16_t>("record name length");
    rec.name = r.str(nlen, "record name");
    const auto rank = r.le<std::uint8_t>("record rank");
    if (rank > 4) throw FormatError(path.string() + ": record '" + rec.name + "' has rank > 4");
    Shape shape(rank);
    for (auto& e : shape) e = r.le<std::uint32_t>("record extent");
    const std::size_t n = shape_size(shape);
    r.need(n * 8, "payload of '" + rec.name + "'");
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64("payload");
    rec.value = Tensor(std::move(shape), std::move(values));
    c.records.push_back(std::move(rec));
  }
  return c;
}

}  // namespace cmtd
