#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "safer/errors.hpp"

namespace safer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major array of doubles. Rank 1 ([n]) and rank 2 ([rows, cols])
/// are the only ranks the library produces.
class Tensor {
 public:
  Tensor() : shape_{0} {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_size(shape_) != values_.size()) {
      throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                       std::to_string(values_.size()) + " values");
    }
  }

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }

  /// Rows of a matrix; a rank-1 tensor is treated as a single row.
  std::size_t rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const { return std::span(values_).subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return std::span(values_).subspan(r * cols(), cols()); }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Rows `idx` of a matrix, in order.
inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> idx) {
  const std::size_t c = m.cols();
  std::vector<double> out;
  out.reserve(idx.size() * c);
  for (std::size_t i : idx) {
    auto r = m.row(i);
    out.insert(out.end(), r.begin(), r.end());
  }
  return Tensor({idx.size(), c}, std::move(out));
}

}  // namespace safer
