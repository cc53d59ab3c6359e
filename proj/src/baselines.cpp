#include "npattack/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "npattack/error.hpp"

namespace npattack {
namespace {

int argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

void finish(AttackResult& res, const Image& x) {
  res.l2_distortion = l2_distance(res.adversarial, x);
  res.linf_distortion = linf_distance(res.adversarial, x);
}

}  // namespace

AttackResult pixel_nes_attack(Oracle& oracle, const Image& x, int y, const PixelNesConfig& cfg) {
  NPATTACK_REQUIRE(cfg.epsilon > 0.0 && cfg.eta > 0.0 && cfg.sigma_pix > 0.0, "pixel_nes: parameters must be positive");
  NPATTACK_REQUIRE(cfg.samples >= 1 && cfg.max_iterations >= 1, "pixel_nes: b and T must be at least 1");
  NPATTACK_REQUIRE(!cfg.targeted || cfg.target_label >= 0, "pixel_nes: targeted attack needs a target label");
  const int label = cfg.targeted ? cfg.target_label : y;
  const std::size_t d = x.size();
  Image mean = x;
  const std::array<double, 1> scale{cfg.sigma_pix};

  AttackResult res;
  double best_loss = std::numeric_limits<double>::infinity();
  Image best = x;
  std::vector<double> candidates, noise, losses;
  for (std::size_t t = 0; t < cfg.max_iterations; ++t) {
    std::size_t bt = cfg.samples;
    if (cfg.query_budget) {
      const std::uint64_t left = *cfg.query_budget - res.queries_used;
      if (left == 0) break;
      bt = static_cast<std::size_t>(std::min<std::uint64_t>(bt, left));
    }
    candidates.assign(bt * d, 0.0);
    noise.assign(bt * d, 0.0);
#pragma omp parallel for schedule(static) if (bt > 1)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(bt); ++i) {
      std::mt19937_64 rng = derived_rng(cfg.seed, t, static_cast<std::uint64_t>(i));
      std::normal_distribution<double> normal(0.0, 1.0);
      double* p = noise.data() + i * d;
      double* c = candidates.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) {
        p[j] = normal(rng);
        c[j] = mean[j] + cfg.sigma_pix * p[j];
      }
      project_in_place({c, d}, x, cfg.epsilon);
    }
    const auto probs = oracle.query_batch(candidates, bt);
    res.queries_used += bt;
    res.iterations_run = t + 1;
    const std::size_t k = probs.size() / bt;
    losses.assign(bt, 0.0);
    std::size_t arg_best = 0;
    std::ptrdiff_t winner = -1;
    double winner_l2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < bt; ++i) {
      const auto p = std::span<const double>(probs).subspan(i * k, k);
      losses[i] = margin_loss(p, label, cfg.targeted);
      if (losses[i] < losses[arg_best]) arg_best = i;
      if (losses[i] == 0.0 && attack_goal_met(p, label, cfg.targeted)) {
        const double l2 = l2_distance(std::span<const double>(candidates).subspan(i * d, d), x);
        if (l2 < winner_l2) {
          winner_l2 = l2;
          winner = static_cast<std::ptrdiff_t>(i);
        }
      }
    }
    res.trace.push_back({losses[arg_best], argmax(std::span<const double>(probs).subspan(arg_best * k, k))});
    if (losses[arg_best] < best_loss) {
      best_loss = losses[arg_best];
      best.assign(candidates.begin() + arg_best * d, candidates.begin() + (arg_best + 1) * d);
    }
    if (winner >= 0) {
      res.success = true;
      best.assign(candidates.begin() + winner * d, candidates.begin() + (winner + 1) * d);
      break;
    }
    center(losses);
    nes_update(mean, losses, noise, cfg.eta, scale);
    project_in_place(mean, x, cfg.epsilon);
  }
  res.adversarial = std::move(best);
  finish(res, x);
  return res;
}

FdEstimate finite_difference(Oracle& oracle, const Image& point, const Image& x, int label, bool targeted,
                             std::span<const std::size_t> coords, double step, double epsilon) {
  NPATTACK_REQUIRE(step > 0.0, "finite_difference: step must be positive");
  NPATTACK_REQUIRE(!coords.empty(), "finite_difference: no coordinates");
  const std::size_t d = point.size();
  FdEstimate est;
  std::vector<double> buffer;
  buffer.reserve(2 * coords.size() * d);
  for (std::size_t c : coords) {
    NPATTACK_REQUIRE(c < d, "finite_difference: coordinate out of range");
    for (double sign : {1.0, -1.0}) {
      Image probe = point;
      probe[c] += sign * step;
      project_in_place(probe, x, epsilon);
      buffer.insert(buffer.end(), probe.begin(), probe.end());
      est.probes.push_back(std::move(probe));
    }
  }
  est.probe_probs = oracle.query_batch(buffer, est.probes.size());
  const std::size_t k = est.probe_probs.size() / est.probes.size();
  for (std::size_t i = 0; i < est.probes.size(); ++i)
    est.probe_loss.push_back(margin_loss(std::span<const double>(est.probe_probs).subspan(i * k, k), label, targeted));
  for (std::size_t j = 0; j < coords.size(); ++j) {
    const std::size_t c = coords[j];
    const double width = est.probes[2 * j][c] - est.probes[2 * j + 1][c];
    est.derivative.push_back(width > 0.0 ? (est.probe_loss[2 * j] - est.probe_loss[2 * j + 1]) / width : 0.0);
  }
  return est;
}

AttackResult coordinate_fd_attack(Oracle& oracle, const Image& x, int y, const CoordinateFdConfig& cfg) {
  NPATTACK_REQUIRE(cfg.step > 0.0, "coordinate_fd: step must be positive");
  NPATTACK_REQUIRE(cfg.epsilon > 0.0 && cfg.lr > 0.0 && cfg.block >= 1, "coordinate_fd: invalid parameters");
  NPATTACK_REQUIRE(!cfg.targeted || cfg.target_label >= 0, "coordinate_fd: targeted attack needs a target label");
  const int label = cfg.targeted ? cfg.target_label : y;
  const std::size_t d = x.size();

  AttackResult res;
  Image cur = project(x, x, cfg.epsilon);
  const auto p0 = oracle.query(cur);
  res.queries_used = 1;
  double cur_loss = margin_loss(p0, label, cfg.targeted);
  res.trace.push_back({cur_loss, argmax(p0)});
  res.adversarial = cur;
  if (cur_loss == 0.0 && attack_goal_met(p0, label, cfg.targeted)) {
    res.success = true;
    finish(res, x);
    return res;
  }

  std::vector<std::size_t> all(d);
  std::iota(all.begin(), all.end(), 0);
  std::uint64_t spent = 0;
  double best_loss = cur_loss;
  for (std::uint64_t t = 0;; ++t) {
    const std::uint64_t left = cfg.budget - spent;
    if (left < 3) break;  // two probes plus the candidate
    const std::size_t m = static_cast<std::size_t>(std::min<std::uint64_t>(cfg.block, (left - 1) / 2));
    std::mt19937_64 rng = derived_rng(cfg.seed, t, 0xFD);
    for (std::size_t i = 0; i < m; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, d - 1);
      std::swap(all[i], all[pick(rng)]);
    }
    const std::vector<std::size_t> coords(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(m));
    const FdEstimate est = finite_difference(oracle, cur, x, label, cfg.targeted, coords, cfg.step, cfg.epsilon);
    spent += 2 * m;
    res.queries_used += 2 * m;
    res.iterations_run = t + 1;

    const std::size_t k = est.probe_probs.size() / est.probes.size();
    std::ptrdiff_t winner = -1;
    double winner_l2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < est.probes.size(); ++i) {
      const auto p = std::span<const double>(est.probe_probs).subspan(i * k, k);
      if (est.probe_loss[i] == 0.0 && attack_goal_met(p, label, cfg.targeted)) {
        const double l2 = l2_distance(est.probes[i], x);
        if (l2 < winner_l2) {
          winner_l2 = l2;
          winner = static_cast<std::ptrdiff_t>(i);
        }
      }
    }
    if (winner >= 0) {
      res.success = true;
      res.adversarial = est.probes[static_cast<std::size_t>(winner)];
      res.trace.push_back({0.0, argmax(std::span<const double>(est.probe_probs).subspan(winner * k, k))});
      break;
    }

    for (std::size_t j = 0; j < m; ++j) cur[coords[j]] -= cfg.lr * est.derivative[j];
    project_in_place(cur, x, cfg.epsilon);
    const auto p = oracle.query(cur);
    spent += 1;
    res.queries_used += 1;
    cur_loss = margin_loss(p, label, cfg.targeted);
    res.trace.push_back({cur_loss, argmax(p)});
    if (cur_loss < best_loss) {
      best_loss = cur_loss;
      res.adversarial = cur;
    }
    if (cur_loss == 0.0 && attack_goal_met(p, label, cfg.targeted)) {
      res.success = true;
      res.adversarial = cur;
      break;
    }
  }
  finish(res, x);
  return res;
}

}  // namespace npattack
