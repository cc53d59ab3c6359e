#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "npattack/autodiff.hpp"
#include "npattack/tensor.hpp"

namespace npattack {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer over a fixed set of externally owned tensors.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamOptions options);

  // One update from the current grad buffers. Every param must have a grad.
  void step();
  void zero_grad();

  std::size_t steps_taken() const { return t_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  std::vector<Tensor*> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

// Scalar function of one tensor, recorded on the given tape.
using TapeFunction = std::function<ad::Var(ad::Tape&, ad::Var)>;

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  // Coordinates whose left and right one-sided slopes disagree (a kink within
  // one step); excluded from the max.
  std::vector<std::size_t> kinks;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// Compares reverse-mode gradients of f at point with central differences.
// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradientCheckReport gradient_check(const TapeFunction& f, const Tensor& point, double step,
                                   double kink_tolerance = 1e-2);

}  // namespace npattack
