#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "npattack/kernels.hpp"

namespace npattack {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles with an optional gradient buffer.
// Rank-2 views treat the first extent as rows and the product of the rest as
// columns; a rank-0/rank-1 tensor of length n is a 1×n row.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor row(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t i, std::size_t j) { return values_[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return values_[i * cols() + j]; }
  double item() const;

  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  // Allocates a zeroed gradient if absent, otherwise zeroes it.
  void zero_grad();
  void drop_grad() { grad_.clear(); }

  kernels::ConstMatrix view() const { return {values_, rows(), cols()}; }
  kernels::Matrix view() { return {values_, rows(), cols()}; }
  kernels::ConstMatrix cview() const { return view(); }

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
};

}  // namespace npattack
