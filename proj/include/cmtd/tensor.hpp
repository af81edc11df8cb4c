#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cmtd/error.hpp"

namespace cmtd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles with rank 0..4.
class Tensor {
 public:
  Tensor() : shape_{}, values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    check_rank();
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_rank();
    if (values_.size() != shape_size(shape_)) {
      throw ShapeError("tensor: " + std::to_string(values_.size()) +
                       " values for shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() { return values_; }
  std::span<const double> data() const { return values_; }
  const std::vector<double>& values() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double item() const {
    if (values_.size() != 1) {
      throw ShapeError("tensor: item() on shape " + shape_str(shape_));
    }
    return values_[0];
  }

  // Number of elements per leading-axis row.
  std::size_t row_size() const {
    return rank() == 0 || shape_[0] == 0 ? size() : size() / shape_[0];
  }

  Tensor reshaped(Shape shape) const {
    Tensor out = *this;
    if (shape_size(shape) != size()) {
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    out.shape_ = std::move(shape);
    out.check_rank();
    return out;
  }

  // Rows [begin, end) along the leading axis.
  Tensor rows(std::size_t begin, std::size_t end) const {
    Shape s = shape_;
    s.at(0) = end - begin;
    const std::size_t rs = row_size();
    return Tensor(std::move(s), std::vector<double>(values_.begin() + begin * rs,
                                                    values_.begin() + end * rs));
  }

  // Gathers rows by index along the leading axis.
  Tensor gather_rows(std::span<const std::size_t> index) const {
    Shape s = shape_;
    s.at(0) = index.size();
    Tensor out(std::move(s));
    const std::size_t rs = row_size();
    for (std::size_t i = 0; i < index.size(); ++i) {
      std::copy_n(values_.begin() + index[i] * rs, rs, out.values_.begin() + i * rs);
    }
    return out;
  }

  void set_row(std::size_t row, const Tensor& src, std::size_t src_row = 0) {
    const std::size_t rs = row_size();
    std::copy_n(src.values_.begin() + src_row * rs, rs, values_.begin() + row * rs);
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_rank() const {
    if (shape_.size() > 4) {
      throw ShapeError("tensor: rank " + std::to_string(shape_.size()) + " exceeds 4");
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Index of the largest entry in row `row` of a (N, K) tensor; ties go to the
// lowest index.
inline int row_argmax(const Tensor& t, std::size_t row) {
  const std::size_t k = t.row_size();
  const auto d = t.data().subspan(row * k, k);
  return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

}  // namespace cmtd
