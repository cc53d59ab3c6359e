#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "npattack/attack.hpp"
#include "npattack/oracle.hpp"

namespace npattack {

// Simplified pixel-space NES: Gaussian search distribution with mean image m
// and fixed std sigma_pix, candidates project(m + sigma_pix·p_i).
struct PixelNesConfig {
  double epsilon = 0.2;
  std::size_t max_iterations = 500;
  std::size_t samples = 30;
  double eta = 0.01;
  double sigma_pix = 0.02;
  std::uint64_t seed = 0;
  bool targeted = false;
  int target_label = -1;
  std::optional<std::uint64_t> query_budget;
};

AttackResult pixel_nes_attack(Oracle& oracle, const Image& x, int y, const PixelNesConfig& cfg);

// Simplified zeroth-order coordinate descent: per iteration a random block of
// coordinates, symmetric finite differences (2 queries per coordinate), one
// projected descent step, then one query on the new iterate.
struct CoordinateFdConfig {
  double epsilon = 0.2;
  std::uint64_t budget = 15000;  // queries after the initial check
  double step = 0.01;            // finite-difference half-width
  double lr = 0.01;
  std::size_t block = 16;
  std::uint64_t seed = 0;
  bool targeted = false;
  int target_label = -1;
};

AttackResult coordinate_fd_attack(Oracle& oracle, const Image& x, int y, const CoordinateFdConfig& cfg);

// Symmetric difference quotients of the margin loss at point along each
// listed coordinate, with probes projected around x. Costs 2 queries per
// coordinate. Probe probabilities are returned row-major (2 rows per
// coordinate, + then -) for callers that want to check them.
struct FdEstimate {
  std::vector<double> derivative;
  std::vector<Image> probes;
  std::vector<double> probe_probs;
  std::vector<double> probe_loss;
};

FdEstimate finite_difference(Oracle& oracle, const Image& point, const Image& x, int label, bool targeted,
                             std::span<const std::size_t> coords, double step, double epsilon);

}  // namespace npattack
