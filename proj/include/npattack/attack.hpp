#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "npattack/anp.hpp"
#include "npattack/image.hpp"
#include "npattack/oracle.hpp"

namespace npattack {

enum class Variant { R, Z, RZ };

// Scale of the NES perturbation: the encoder's sigma (broadcast over r rows)
// or a fixed scalar.
enum class SigmaMode { Encoder, Fixed };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);
const char* sigma_mode_name(SigmaMode m);
SigmaMode parse_sigma_mode(const std::string& s);

struct AttackConfig {
  Variant variant = Variant::R;
  double epsilon = 0.2;
  std::size_t max_iterations = 900;
  std::size_t samples = 30;
  double eta = 0.01;
  SigmaMode sigma_mode = SigmaMode::Encoder;
  double sigma_prime = 1.0;
  bool targeted = false;
  int target_label = -1;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> query_budget;
  // Variant R: use z = mu instead of a fresh draw per sample.
  bool z_at_mean = false;
  // Variants Z/RZ: draw z_i around mu_i with its own noise instead of reusing p_i.
  bool z_independent = false;
  // Test hook: all perturbations are zero.
  bool zero_perturbation = false;
};

void validate(const AttackConfig& cfg);

struct TraceEntry {
  double best_loss = 0.0;
  int best_label = 0;
};

struct AttackResult {
  bool success = false;
  Image adversarial;
  std::uint64_t queries_used = 0;
  double l2_distortion = 0.0;
  double linf_distortion = 0.0;
  std::size_t iterations_run = 0;
  std::vector<TraceEntry> trace;
};

// Hinge on log-probability differences; zero exactly when the (un)targeted
// goal is met. label is the true class, or the target class when targeted.
double margin_loss(std::span<const double> probs, int label, bool targeted);
bool attack_goal_met(std::span<const double> probs, int label, bool targeted);

// Elementwise clamp into [x - eps, x + eps] ∩ [0, 1].
Image project(std::span<const double> x_rec, std::span<const double> x, double epsilon);
void project_in_place(std::span<double> x_rec, std::span<const double> x, double epsilon);

double l2_distance(std::span<const double> a, std::span<const double> b);
double linf_distance(std::span<const double> a, std::span<const double> b);

struct Sample {
  std::vector<double> z;
  Tensor r;
  std::vector<double> p;  // N×d_r for R, d_z for Z and RZ
};

struct SearchState {
  std::vector<double> mu;
  std::vector<double> sigma;  // encoder sigma, frozen
  Tensor r;
};

// Perturbation scale per the config: sigma for Encoder mode, {sigma_prime}
// for Fixed mode. Broadcast cyclically over the perturbed variable.
std::vector<double> perturbation_scale(const SearchState& state, const AttackConfig& cfg);

// Draws sample i of iteration t. The stream depends only on
// (cfg.seed, t, i).
Sample draw_sample(const SearchState& state, const AttackConfig& cfg, std::span<const double> scale,
                   std::uint64_t iteration, std::uint64_t index, bool with_r = true);
std::vector<Sample> sample_batch(const SearchState& state, const AttackConfig& cfg, std::size_t b,
                                 std::uint64_t iteration);

// variable -= eta / (b * scale[j % |scale|]) * sum_i losses[i] * p_i[j], with
// p_i the i-th row of perturbations (b × |variable|). Losses must be centered.
void nes_update(std::span<double> variable, std::span<const double> losses, std::span<const double> perturbations,
                double eta, std::span<const double> scale);

// Subtracts the mean in place.
void center(std::span<double> losses);

AttackResult run_attack(Oracle& oracle, const AnpParameters& np, const Image& x, int y, const AttackConfig& cfg);

// Fraction of results that succeeded within each budget.
std::vector<double> success_curve(std::span<const AttackResult> results, std::span<const std::uint64_t> budgets);

}  // namespace npattack
