#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "npattack/attack.hpp"
#include "npattack/error.hpp"

using namespace npattack;

namespace {

AnpArch square_arch() {
  AnpArch a = testutil::tiny_arch(4, 4);
  a.d_r = a.d_z;
  return a;
}

// Ignores its input: always predicts `favored` with high confidence.
Classifier constant_classifier(const ImageShape& s, int classes, int favored) {
  Classifier c = init_classifier(s, {4}, classes, 1);
  for (double& v : c.layers.back().w.values()) v = 0.0;
  for (double& v : c.layers.back().b.values()) v = 0.0;
  c.layers.back().b[static_cast<std::size_t>(favored)] = 5.0;
  return c;
}

SearchState random_state(std::size_t n, std::size_t dr, std::size_t dz, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SearchState s;
  s.mu = testutil::random_vector(dz, rng, -1, 1);
  s.sigma = testutil::random_vector(dz, rng, 0.2, 1.0);
  s.r = testutil::random_tensor({n, dr}, rng);
  return s;
}

double quad_loss(std::span<const double> v, std::span<const double> target) {
  double s = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) s += (v[j] - target[j]) * (v[j] - target[j]);
  return s;
}

}  // namespace

TEST_CASE("margin loss examples") {
  const std::vector<double> p{0.7, 0.2, 0.1};
  CHECK(margin_loss(p, 0, false) == doctest::Approx(std::log(0.7) - std::log(0.2)).epsilon(1e-12));
  CHECK(margin_loss(p, 0, false) == doctest::Approx(1.2528).epsilon(1e-4));
  CHECK(margin_loss(p, 1, false) == 0.0);
  CHECK(margin_loss(p, 0, true) == 0.0);
  CHECK(margin_loss(p, 2, true) == doctest::Approx(std::log(0.7) - std::log(0.1)).epsilon(1e-12));
  CHECK_THROWS_AS(margin_loss(p, 3, false), ContractViolation);
  CHECK_THROWS_AS(margin_loss(p, -1, false), ContractViolation);
  CHECK(std::isfinite(margin_loss(std::vector<double>{1.0, 0.0}, 0, false)));
}

TEST_CASE("margin loss ignores a common shift of the log-probabilities") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = testutil::random_vector(5, rng, 0.01, 1.0);
    const double c = std::exp(std::uniform_real_distribution<double>(-3, 3)(rng));
    std::vector<double> q(p);
    for (double& v : q) v *= c;
    for (bool targeted : {false, true})
      CHECK(margin_loss(p, trial % 5, targeted) == doctest::Approx(margin_loss(q, trial % 5, targeted)).epsilon(1e-9));
  }
}

TEST_CASE("margin loss is zero exactly when the goal is met") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = testutil::random_vector(4, rng, 0.01, 1.0);
    const int y = trial % 4;
    for (bool targeted : {false, true}) CHECK((margin_loss(p, y, targeted) == 0.0) == attack_goal_met(p, y, targeted));
  }
}

TEST_CASE("projection examples") {
  const Image x(6, 0.5);
  const Image inside{0.45, 0.5, 0.55, 0.6, 0.4, 0.69};
  CHECK(project(inside, x, 0.2) == inside);
  const Image far(6, 1.0);
  for (double v : project(far, x, 0.2)) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto xr = testutil::random_vector(50, rng, -1, 2);
    const auto xb = testutil::random_vector(50, rng);
    const auto out = project(xr, xb, 0.05);
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(std::abs(out[i] - xb[i]) <= 0.05);
      CHECK(out[i] >= 0.0);
      CHECK(out[i] <= 1.0);
    }
  }
}

TEST_CASE("zero perturbation under R leaves r unchanged") {
  const SearchState s = random_state(5, 4, 4, 4);
  AttackConfig cfg;
  cfg.zero_perturbation = true;
  for (const Sample& smp : sample_batch(s, cfg, 3, 0)) CHECK(smp.r.storage() == s.r.storage());
}

TEST_CASE("R perturbs r by sigma broadcast over rows and draws z around mu") {
  SearchState s = random_state(3, 4, 4, 5);
  AttackConfig cfg;
  cfg.seed = 9;
  const auto scale = perturbation_scale(s, cfg);
  const Sample smp = draw_sample(s, cfg, scale, 2, 1);
  REQUIRE(smp.p.size() == 12);
  for (std::size_t k = 0; k < 12; ++k)
    CHECK(smp.r[k] == doctest::Approx(s.r[k] + s.sigma[k % 4] * smp.p[k]).epsilon(1e-14));
  cfg.z_at_mean = true;
  CHECK(draw_sample(s, cfg, scale, 2, 1).z == s.mu);
  cfg.sigma_mode = SigmaMode::Fixed;
  cfg.sigma_prime = 3.0;
  CHECK(perturbation_scale(s, cfg) == std::vector<double>{3.0});
}

TEST_CASE("sample streams depend only on seed, iteration and index") {
  const SearchState s = random_state(4, 3, 3, 6);
  AttackConfig cfg;
  cfg.variant = Variant::RZ;
  cfg.seed = 17;
  const auto batch = sample_batch(s, cfg, 5, 7);
  const auto again = draw_sample(s, cfg, perturbation_scale(s, cfg), 7, 3);
  CHECK(batch[3].z == again.z);
  CHECK(batch[3].p == again.p);
  CHECK(batch[3].r.storage() == again.r.storage());
  CHECK(batch[2].p != batch[3].p);
}

TEST_CASE("RZ applies one perturbation to mu and to every r row") {
  const SearchState s = random_state(3, 4, 4, 7);
  AttackConfig cfg;
  cfg.variant = Variant::RZ;
  const auto scale = perturbation_scale(s, cfg);
  const Sample smp = draw_sample(s, cfg, scale, 0, 0);
  REQUIRE(smp.p.size() == 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(smp.r.at(i, j) == doctest::Approx(s.r.at(i, j) + s.sigma[j] * smp.p[j]).epsilon(1e-14));
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(smp.z[j] == doctest::Approx(s.mu[j] + 2.0 * s.sigma[j] * smp.p[j]).epsilon(1e-12));
}

TEST_CASE("Z samples are centred on mu and their spread scales with sigma") {
  SearchState s = random_state(2, 3, 3, 8);
  AttackConfig cfg;
  cfg.variant = Variant::Z;
  cfg.seed = 3;
  const std::size_t b = 10000;
  auto stats = [&](const SearchState& st) {
    const auto batch = sample_batch(st, cfg, b, 0);
    std::vector<double> mean(3, 0.0), var(3, 0.0);
    for (const Sample& smp : batch)
      for (std::size_t j = 0; j < 3; ++j) mean[j] += smp.z[j] / b;
    for (const Sample& smp : batch)
      for (std::size_t j = 0; j < 3; ++j) var[j] += (smp.z[j] - mean[j]) * (smp.z[j] - mean[j]) / (b - 1);
    return std::make_pair(mean, var);
  };
  const auto [m1, v1] = stats(s);
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(m1[j] - s.mu[j]) < 3.0 * std::sqrt(v1[j] / b));
  SearchState s2 = s;
  for (double& v : s2.sigma) v *= 2.0;
  const auto [m2, v2] = stats(s2);
  for (std::size_t j = 0; j < 3; ++j) {
    const double ratio = std::sqrt(v2[j] / v1[j]);
    CHECK(ratio == doctest::Approx(2.0).epsilon(0.05));
  }
  cfg.zero_perturbation = true;
  for (const Sample& smp : sample_batch(s, cfg, 2, 0)) {
    CHECK(smp.z == s.mu);
    CHECK(smp.r.storage() == s.r.storage());
  }
}

TEST_CASE("centering sums to zero") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    auto l = testutil::random_vector(30, rng, 0, 50);
    center(l);
    CHECK(std::abs(std::accumulate(l.begin(), l.end(), 0.0)) < 1e-12);
  }
}

TEST_CASE("nes update examples") {
  std::vector<double> v{1.0, 2.0};
  const std::vector<double> zero{0.0, 0.0};
  const std::vector<double> p{0.3, -0.4, -0.3, 0.4};
  const std::vector<double> sigma{0.5};
  nes_update(v, zero, p, 0.1, sigma);
  CHECK(v == std::vector<double>{1.0, 2.0});
  const std::vector<double> l{1.0, -1.0};
  nes_update(v, l, p, 0.1, sigma);
  // -(eta/(b sigma)) * (u - (-u)) = -(eta/sigma) u
  CHECK(v[0] == doctest::Approx(1.0 - 0.1 / 0.5 * 0.3).epsilon(1e-14));
  CHECK(v[1] == doctest::Approx(2.0 + 0.1 / 0.5 * 0.4).epsilon(1e-14));
  const std::vector<double> uncentered{1.0, 2.0};
  CHECK_THROWS_AS(nes_update(v, uncentered, p, 0.1, sigma), ContractViolation);
  CHECK_THROWS_AS(nes_update(v, l, std::vector<double>{1.0, 2.0, 3.0}, 0.1, sigma), ContractViolation);
}

TEST_CASE("NES converges on a quadratic") {
  const std::size_t n = 10, b = 50;
  std::mt19937_64 rng(11);
  const auto target = testutil::random_vector(n, rng, -1, 1);
  std::vector<double> v(n, 0.0);
  const double sigma = 0.1, eta = 0.05;
  const double start = std::sqrt(quad_loss(v, target));
  std::normal_distribution<double> normal(0, 1);
  std::vector<double> p(b * n), losses(b), cand(n);
  for (int t = 0; t < 200; ++t) {
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        p[i * n + j] = normal(rng);
        cand[j] = v[j] + sigma * p[i * n + j];
      }
      losses[i] = quad_loss(cand, target);
    }
    center(losses);
    nes_update(v, losses, p, eta, std::vector<double>{sigma});
  }
  CHECK(std::sqrt(quad_loss(v, target)) <= 0.1 * start);
}

TEST_CASE("mean NES update aligns with the negative gradient") {
  const std::size_t n = 8, b = 30, batches = 10000;
  std::mt19937_64 rng(12);
  const auto target = testutil::random_vector(n, rng, -1, 1);
  const std::vector<double> v0(n, 0.0);
  const double sigma = 0.1;
  std::normal_distribution<double> normal(0, 1);
  std::vector<double> mean_step(n, 0.0), p(b * n), losses(b), cand(n);
  for (std::size_t k = 0; k < batches; ++k) {
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        p[i * n + j] = normal(rng);
        cand[j] = v0[j] + sigma * p[i * n + j];
      }
      losses[i] = quad_loss(cand, target);
    }
    center(losses);
    std::vector<double> v = v0;
    nes_update(v, losses, p, 1.0, std::vector<double>{sigma});
    for (std::size_t j = 0; j < n; ++j) mean_step[j] += (v[j] - v0[j]) / batches;
  }
  double dot = 0.0, a = 0.0, g = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double neg_grad = -2.0 * (v0[j] - target[j]);
    dot += mean_step[j] * neg_grad;
    a += mean_step[j] * mean_step[j];
    g += neg_grad * neg_grad;
  }
  CHECK(dot / std::sqrt(a * g) > 0.9);
}

TEST_CASE("already misclassified input succeeds in the first batch") {
  const AnpArch arch = square_arch();
  const AnpParameters np = init_anp(arch, 1);
  const Classifier clf = constant_classifier(arch.image, 3, 0);
  std::mt19937_64 rng(13);
  const Image x = testutil::random_vector(16, rng);
  for (Variant v : {Variant::R, Variant::Z, Variant::RZ}) {
    QueryOracle o(clf);
    o.set_guard(x, 0.2);
    AttackConfig cfg;
    cfg.variant = v;
    cfg.samples = 7;
    const AttackResult r = run_attack(o, np, x, 1, cfg);
    CHECK(r.success);
    CHECK(r.iterations_run == 1);
    CHECK(r.queries_used == 7);
    CHECK(o.query_count() == 7);
    CHECK(o.guard_violations() == 0);
    CHECK(r.linf_distortion <= 0.2 + 1e-12);
    CHECK(predict(clf, r.adversarial) != 1);
  }
  QueryOracle o(clf);
  AttackConfig cfg;
  cfg.targeted = true;
  cfg.target_label = 0;
  CHECK(run_attack(o, np, x, 2, cfg).success);
}

TEST_CASE("hopeless attacks spend exactly b*T or the budget") {
  const AnpArch arch = square_arch();
  const AnpParameters np = init_anp(arch, 2);
  const Classifier clf = constant_classifier(arch.image, 3, 0);
  std::mt19937_64 rng(14);
  const Image x = testutil::random_vector(16, rng);
  for (int trial = 0; trial < 20; ++trial) {
    AttackConfig cfg;
    cfg.variant = static_cast<Variant>(trial % 3);
    cfg.samples = 1 + static_cast<std::size_t>(trial % 6);
    cfg.max_iterations = 1 + static_cast<std::size_t>(trial % 5);
    cfg.seed = static_cast<std::uint64_t>(trial);
    if (trial % 2) cfg.query_budget = static_cast<std::uint64_t>(trial);
    QueryOracle o(clf);
    o.set_guard(x, cfg.epsilon);
    const AttackResult r = run_attack(o, np, x, 0, cfg);
    const std::uint64_t full = cfg.samples * cfg.max_iterations;
    const std::uint64_t want = cfg.query_budget ? std::min(full, *cfg.query_budget) : full;
    CHECK_FALSE(r.success);
    CHECK(r.queries_used == want);
    CHECK(o.query_count() == want);
    CHECK(r.trace.size() == r.iterations_run);
    CHECK(o.guard_violations() == 0);
    CHECK(r.linf_distortion <= cfg.epsilon + 1e-12);
  }
}

TEST_CASE("run_attack is deterministic and validates its config") {
  const AnpArch arch = square_arch();
  const AnpParameters np = init_anp(arch, 3);
  const Classifier clf = init_classifier(arch.image, {8}, 3, 4);
  std::mt19937_64 rng(15);
  const Image x = testutil::random_vector(16, rng);
  AttackConfig cfg;
  cfg.samples = 5;
  cfg.max_iterations = 6;
  cfg.seed = 21;
  QueryOracle o1(clf), o2(clf);
  const int y = predict(clf, x);
  const AttackResult a = run_attack(o1, np, x, y, cfg);
  const AttackResult b = run_attack(o2, np, x, y, cfg);
  CHECK(a.adversarial == b.adversarial);
  CHECK(a.queries_used == b.queries_used);
  CHECK(a.l2_distortion == b.l2_distortion);

  AttackConfig bad = cfg;
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(run_attack(o1, np, x, y, bad), ContractViolation);
  bad = cfg;
  bad.samples = 0;
  CHECK_THROWS_AS(run_attack(o1, np, x, y, bad), ContractViolation);
  bad = cfg;
  bad.targeted = true;
  CHECK_THROWS_AS(run_attack(o1, np, x, y, bad), ContractViolation);
  CHECK_THROWS_AS(run_attack(o1, np, Image(15, 0.5), y, cfg), ContractViolation);
}

TEST_CASE("success curve examples") {
  std::vector<AttackResult> rs(3);
  rs[0].success = true;
  rs[0].queries_used = 100;
  rs[1].success = true;
  rs[1].queries_used = 300;
  rs[2].queries_used = 50;
  const std::vector<std::uint64_t> budgets{200, 400};
  const auto c = success_curve(rs, budgets);
  CHECK(c[0] == doctest::Approx(1.0 / 3.0));
  CHECK(c[1] == doctest::Approx(2.0 / 3.0));
  rs[0].success = rs[1].success = false;
  for (double v : success_curve(rs, budgets)) CHECK(v == 0.0);
  CHECK_THROWS_AS(success_curve(std::span<const AttackResult>(), budgets), ContractViolation);
}
