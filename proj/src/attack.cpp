#include "npattack/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "npattack/error.hpp"

namespace npattack {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::R: return "R";
    case Variant::Z: return "Z";
    case Variant::RZ: return "RZ";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "R" || s == "r") return Variant::R;
  if (s == "Z" || s == "z") return Variant::Z;
  if (s == "RZ" || s == "rz") return Variant::RZ;
  throw ContractViolation("unknown attack variant '" + s + "' (expected R, Z or RZ)");
}

const char* sigma_mode_name(SigmaMode m) { return m == SigmaMode::Encoder ? "encoder" : "fixed"; }

SigmaMode parse_sigma_mode(const std::string& s) {
  if (s == "encoder") return SigmaMode::Encoder;
  if (s == "fixed") return SigmaMode::Fixed;
  throw ContractViolation("unknown sigma mode '" + s + "' (expected encoder or fixed)");
}

void validate(const AttackConfig& cfg) {
  NPATTACK_REQUIRE(cfg.epsilon > 0.0, "attack: epsilon must be positive");
  NPATTACK_REQUIRE(cfg.samples >= 1, "attack: sample size must be at least 1");
  NPATTACK_REQUIRE(cfg.max_iterations >= 1, "attack: max iterations must be at least 1");
  NPATTACK_REQUIRE(cfg.eta > 0.0, "attack: learning rate must be positive");
  NPATTACK_REQUIRE(cfg.sigma_mode == SigmaMode::Encoder || cfg.sigma_prime > 0.0,
                   "attack: fixed sigma must be positive");
  NPATTACK_REQUIRE(!cfg.targeted || cfg.target_label >= 0, "attack: targeted attack needs a target label");
}

double margin_loss(std::span<const double> probs, int label, bool targeted) {
  NPATTACK_REQUIRE(label >= 0 && static_cast<std::size_t>(label) < probs.size(), "margin_loss: label out of range");
  NPATTACK_REQUIRE(probs.size() >= 2, "margin_loss: need at least two classes");
  // Underflowed probabilities are read as the smallest normal double.
  auto safe_log = [](double p) { return std::log(std::max(p, std::numeric_limits<double>::min())); };
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < probs.size(); ++c) {
    NPATTACK_REQUIRE(probs[c] >= 0.0 && std::isfinite(probs[c]), "margin_loss: probabilities must be non-negative");
    if (static_cast<int>(c) != label) other = std::max(other, safe_log(probs[c]));
  }
  const double own = safe_log(probs[static_cast<std::size_t>(label)]);
  return std::max(0.0, targeted ? other - own : own - other);
}

bool attack_goal_met(std::span<const double> probs, int label, bool targeted) {
  const int arg = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  return targeted ? arg == label : arg != label;
}

void project_in_place(std::span<double> x_rec, std::span<const double> x, double epsilon) {
  NPATTACK_REQUIRE(x_rec.size() == x.size(), "project: shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    const PixelBox box = linf_box(x[i], epsilon);
    x_rec[i] = std::clamp(x_rec[i], box.lo, box.hi);
  }
}

Image project(std::span<const double> x_rec, std::span<const double> x, double epsilon) {
  Image out(x_rec.begin(), x_rec.end());
  project_in_place(out, x, epsilon);
  return out;
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  NPATTACK_REQUIRE(a.size() == b.size(), "l2_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double linf_distance(std::span<const double> a, std::span<const double> b) {
  NPATTACK_REQUIRE(a.size() == b.size(), "linf_distance: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> perturbation_scale(const SearchState& state, const AttackConfig& cfg) {
  if (cfg.sigma_mode == SigmaMode::Fixed) return {cfg.sigma_prime};
  if (cfg.variant != Variant::Z)
    NPATTACK_REQUIRE(state.r.cols() == state.sigma.size(),
                     "encoder sigma mode needs d_r == d_z to broadcast sigma over r rows");
  return state.sigma;
}

Sample draw_sample(const SearchState& s, const AttackConfig& cfg, std::span<const double> scale,
                   std::uint64_t iteration, std::uint64_t index, bool with_r) {
  NPATTACK_REQUIRE(!scale.empty(), "draw_sample: empty scale");
  for (double v : scale) NPATTACK_REQUIRE(v > 0.0, "draw_sample: scale must be positive");
  std::mt19937_64 rng = derived_rng(cfg.seed, iteration, index);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t dz = s.mu.size();
  const std::size_t dr = s.r.cols();
  const std::size_t S = scale.size();
  Sample out;
  auto draw = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& e : v) e = normal(rng);
    if (cfg.zero_perturbation) std::fill(v.begin(), v.end(), 0.0);
    return v;
  };

  if (cfg.variant == Variant::R) {
    out.p = draw(s.r.size());
    if (with_r) {
      out.r = s.r;
      auto rv = out.r.values();
      for (std::size_t k = 0; k < rv.size(); ++k) rv[k] += scale[(k % dr) % S] * out.p[k];
    }
    out.z = s.mu;
    if (!cfg.z_at_mean) {
      for (std::size_t j = 0; j < dz; ++j) out.z[j] += s.sigma[j] * normal(rng);
    }
    return out;
  }

  if (cfg.variant == Variant::RZ)
    NPATTACK_REQUIRE(dr == dz, "variant RZ needs d_r == d_z to share one perturbation");
  out.p = draw(dz);
  std::vector<double> q;
  if (cfg.z_independent) {
    q.resize(dz);
    for (double& e : q) e = normal(rng);
  }
  out.z.resize(dz);
  for (std::size_t j = 0; j < dz; ++j) {
    const double mu_i = s.mu[j] + scale[j % S] * out.p[j];
    out.z[j] = mu_i + s.sigma[j] * (cfg.z_independent ? q[j] : out.p[j]);
  }
  if (with_r) {
    out.r = s.r;
    if (cfg.variant == Variant::RZ) {
      auto rv = out.r.values();
      for (std::size_t k = 0; k < rv.size(); ++k) {
        const std::size_t c = k % dr;
        rv[k] += scale[c % S] * out.p[c];
      }
    }
  }
  return out;
}

std::vector<Sample> sample_batch(const SearchState& state, const AttackConfig& cfg, std::size_t b,
                                 std::uint64_t iteration) {
  NPATTACK_REQUIRE(b >= 1, "sample_batch: b must be at least 1");
  for (double v : state.sigma) NPATTACK_REQUIRE(v > 0.0, "sample_batch: sigma must be positive");
  const auto scale = perturbation_scale(state, cfg);
  std::vector<Sample> out(b);
  for (std::size_t i = 0; i < b; ++i) out[i] = draw_sample(state, cfg, scale, iteration, i);
  return out;
}

void center(std::span<double> losses) {
  if (losses.empty()) return;
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
  for (double& l : losses) l -= mean;
}

void nes_update(std::span<double> variable, std::span<const double> losses, std::span<const double> perturbations,
                double eta, std::span<const double> scale) {
  const std::size_t b = losses.size();
  const std::size_t n = variable.size();
  NPATTACK_REQUIRE(b >= 1, "nes_update: no losses");
  NPATTACK_REQUIRE(perturbations.size() == b * n, "nes_update: perturbations do not match the variable");
  NPATTACK_REQUIRE(!scale.empty(), "nes_update: empty scale");
  double sum = 0.0, mag = 0.0;
  for (double l : losses) {
    sum += l;
    mag += std::abs(l);
  }
  NPATTACK_REQUIRE(std::abs(sum) <= 1e-9 * (1.0 + mag), "nes_update: losses are not centered");
  std::vector<double> acc(n, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const double l = losses[i];
    if (l == 0.0) continue;
    const double* p = perturbations.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc[j] += l * p[j];
  }
  const double factor = eta / static_cast<double>(b);
  for (std::size_t j = 0; j < n; ++j) variable[j] -= factor / scale[j % scale.size()] * acc[j];
}

AttackResult run_attack(Oracle& oracle, const AnpParameters& np, const Image& x, int y, const AttackConfig& cfg) {
  validate(cfg);
  const ImageShape& shape = np.arch.image;
  NPATTACK_REQUIRE(x.size() == shape.size(), "run_attack: image does not match the model's size");
  const int label = cfg.targeted ? cfg.target_label : y;
  const std::size_t d = x.size();

  const PixelContext ctx = full_context(x, shape);
  const Encoding enc = encode(np, ctx, ctx.positions);
  SearchState state{enc.latent.mu, enc.latent.sigma, enc.det.r};
  const std::vector<double> scale = perturbation_scale(state, cfg);
  FastDecoder decoder(np, ctx.positions);
  const bool r_moves = cfg.variant != Variant::Z;
  if (!r_moves) decoder.fix_r(state.r);

  AttackResult res;
  double best_loss = std::numeric_limits<double>::infinity();
  Image best_image = project(x, x, cfg.epsilon);
  std::vector<double> candidates;
  std::vector<Sample> samples;
  std::vector<double> losses;
  std::vector<double> flat;

  for (std::size_t t = 0; t < cfg.max_iterations; ++t) {
    std::size_t bt = cfg.samples;
    if (cfg.query_budget) {
      const std::uint64_t left = *cfg.query_budget - res.queries_used;
      if (left == 0) break;
      bt = static_cast<std::size_t>(std::min<std::uint64_t>(bt, left));
    }
    samples.assign(bt, Sample{});
    candidates.assign(bt * d, 0.0);
#pragma omp parallel for schedule(static) if (bt > 1)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(bt); ++i) {
      samples[i] = draw_sample(state, cfg, scale, t, static_cast<std::uint64_t>(i), r_moves);
      std::span<double> out(candidates.data() + i * d, d);
      if (r_moves)
        decoder.decode(samples[i].z, samples[i].r, out);
      else
        decoder.decode_fixed_r(samples[i].z, out);
      project_in_place(out, x, cfg.epsilon);
      samples[i].r = Tensor();
    }
    const std::vector<double> probs = oracle.query_batch(candidates, bt);
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
    const auto best_probs = std::span<const double>(probs).subspan(arg_best * k, k);
    res.trace.push_back({losses[arg_best],
                         static_cast<int>(std::max_element(best_probs.begin(), best_probs.end()) - best_probs.begin())});
    if (losses[arg_best] < best_loss) {
      best_loss = losses[arg_best];
      best_image.assign(candidates.begin() + arg_best * d, candidates.begin() + (arg_best + 1) * d);
    }
    if (winner >= 0) {
      res.success = true;
      best_image.assign(candidates.begin() + winner * d, candidates.begin() + (winner + 1) * d);
      break;
    }

    center(losses);
    const std::size_t plen = samples[0].p.size();
    flat.resize(bt * plen);
    for (std::size_t i = 0; i < bt; ++i) std::copy(samples[i].p.begin(), samples[i].p.end(), flat.begin() + i * plen);
    switch (cfg.variant) {
      case Variant::R:
        nes_update(state.r.values(), losses, flat, cfg.eta, scale);
        break;
      case Variant::Z:
        nes_update(state.mu, losses, flat, cfg.eta, scale);
        break;
      case Variant::RZ: {
        nes_update(state.mu, losses, flat, cfg.eta, scale);
        std::vector<double> delta(plen, 0.0);
        nes_update(delta, losses, flat, cfg.eta, scale);
        auto rv = state.r.values();
        for (std::size_t j = 0; j < rv.size(); ++j) rv[j] += delta[j % plen];
        break;
      }
    }
  }

  res.adversarial = std::move(best_image);
  res.l2_distortion = l2_distance(res.adversarial, x);
  res.linf_distortion = linf_distance(res.adversarial, x);
  return res;
}

std::vector<double> success_curve(std::span<const AttackResult> results, std::span<const std::uint64_t> budgets) {
  NPATTACK_REQUIRE(!results.empty(), "success_curve: no results");
  std::vector<double> curve;
  curve.reserve(budgets.size());
  for (std::uint64_t b : budgets) {
    std::size_t n = 0;
    for (const AttackResult& r : results) n += r.success && r.queries_used <= b;
    curve.push_back(static_cast<double>(n) / static_cast<double>(results.size()));
  }
  return curve;
}

}  // namespace npattack
