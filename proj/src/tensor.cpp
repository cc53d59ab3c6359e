#include "npattack/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "npattack/error.hpp"

namespace npattack {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (std::size_t e : shape_) NPATTACK_REQUIRE(e > 0, "tensor extents must be positive");
  values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (std::size_t e : shape_) NPATTACK_REQUIRE(e > 0, "tensor extents must be positive");
  NPATTACK_REQUIRE(shape_size(shape_) == values_.size(), "tensor data length does not match its shape");
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{1, n}, std::move(values));
}

std::size_t Tensor::rows() const { return shape_.size() < 2 ? 1 : shape_[0]; }

std::size_t Tensor::cols() const {
  if (shape_.empty()) return values_.size();
  if (shape_.size() == 1) return shape_[0];
  return values_.size() / shape_[0];
}

double Tensor::item() const {
  NPATTACK_REQUIRE(values_.size() == 1, "item() on a non-scalar tensor");
  return values_[0];
}

void Tensor::zero_grad() {
  if (grad_.size() != values_.size())
    grad_.assign(values_.size(), 0.0);
  else
    std::fill(grad_.begin(), grad_.end(), 0.0);
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace npattack
