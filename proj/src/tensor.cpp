#include "mct/tensor.hpp"

#include <cmath>
#include <string>

#include "mct/errors.hpp"

namespace mct {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor() : shape_{1, 1}, data_{0.0} {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw ContractError("tensor: shape must have at least one extent");
  for (auto e : shape_) {
    if (e == 0) throw ContractError("tensor: extents must be positive");
  }
  if (shape_size(shape_) != data_.size()) {
    throw ContractError("tensor: data length " + std::to_string(data_.size()) +
                        " does not match shape product " + std::to_string(shape_size(shape_)));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw DomainError("tensor: non-finite entry at index " + std::to_string(i));
    }
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::row(std::vector<double> data) {
  const auto n = data.size();
  return Tensor({1, n}, std::move(data));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw ContractError("tensor: ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.size() == 1) return 1;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const noexcept { return shape_.back(); }

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("tensor: item() on a tensor with more than one element");
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) throw ContractError("tensor: reshape changes element count");
  return Tensor(std::move(shape), data_);
}

Tensor vstack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("vstack: no parts");
  const auto cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ContractError("vstack: column mismatch");
    rows += p.rows();
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor::matrix(rows, cols, std::move(data));
}

}  // namespace mct
