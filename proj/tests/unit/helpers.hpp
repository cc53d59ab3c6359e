#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "npattack/anp.hpp"
#include "npattack/tensor.hpp"

namespace testutil {

inline npattack::Tensor random_tensor(npattack::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  npattack::Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline npattack::AnpArch tiny_arch(std::size_t h = 3, std::size_t w = 3) {
  npattack::AnpArch a;
  a.image = {h, w, 1};
  a.hidden = 8;
  a.d_r = 6;
  a.d_z = 5;
  return a;
}

}  // namespace testutil
