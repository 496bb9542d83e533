#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace mct {

using Shape = std::vector<std::size_t>;

// Dense row-major f64 tensor. Immutable once built; construction rejects
// non-positive extents, size mismatches and any NaN/Inf entry.
class Tensor {
 public:
  Tensor();  // 1x1 zero
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor row(std::vector<double> data);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<const double> data() const noexcept { return data_; }

  // 2-D views. rank-1 tensors read as a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;
  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  double item() const;  // single-element tensors only

  Tensor reshaped(Shape shape) const;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const Shape& shape);

// Stack equally-wide matrices vertically.
Tensor vstack(std::span<const Tensor> parts);

}  // namespace mct
