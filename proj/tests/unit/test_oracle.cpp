#include <cmath>
#include <thread>

#include "doctest.h"
#include "helpers.hpp"
#include "npattack/error.hpp"
#include "npattack/oracle.hpp"

using namespace npattack;

namespace {

const Classifier& victim() {
  static const Classifier clf = init_classifier({3, 3, 1}, {6}, 4, 1);
  return clf;
}

}  // namespace

TEST_CASE("each query counts once and returns a distribution") {
  QueryOracle o(victim());
  std::mt19937_64 rng(1);
  for (int i = 1; i <= 5; ++i) {
    const auto p = o.query(testutil::random_vector(9, rng));
    CHECK(o.query_count() == static_cast<std::uint64_t>(i));
    double s = 0.0;
    for (double v : p) {
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  const auto batch = testutil::random_vector(27, rng);
  const auto probs = o.query_batch(batch, 3);
  CHECK(probs.size() == 12);
  CHECK(o.query_count() == 8);
  const auto single = o.query(std::span<const double>(batch).subspan(9, 9));
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(single[c] - probs[4 + c]) < 1e-15);
  o.reset();
  CHECK(o.query_count() == 0);
}

TEST_CASE("out-of-range or misshaped images are rejected") {
  QueryOracle o(victim());
  Image x(9, 0.5);
  x[3] = 1.0000001;
  CHECK_THROWS_AS(o.query(x), ContractViolation);
  x[3] = std::nan("");
  CHECK_THROWS_AS(o.query(x), ContractViolation);
  CHECK_THROWS_AS(o.query(Image(8, 0.5)), ContractViolation);
  CHECK_THROWS_AS(o.query_batch(Image(17, 0.5), 2), ContractViolation);
}

TEST_CASE("cache hits are still counted") {
  QueryOracle o(victim(), {.cache = true, .log = true});
  const Image x(9, 0.25);
  const auto a = o.query(x);
  const auto b = o.query(x);
  CHECK(a == b);
  CHECK(o.query_count() == 2);
  REQUIRE(o.log().size() == 2);
  CHECK(o.log()[0].digest == image_digest(x));
  CHECK(o.log()[0].predicted == o.log()[1].predicted);
}

TEST_CASE("guard counts queries outside the epsilon ball") {
  QueryOracle o(victim());
  const Image x(9, 0.5);
  o.set_guard(x, 0.1);
  Image in = x;
  in[0] = 0.6;
  o.query(in);
  CHECK(o.guard_violations() == 0);
  in[0] = 0.61;
  o.query(in);
  CHECK(o.guard_violations() == 1);
  o.clear_guard();
  o.query(in);
  CHECK(o.guard_violations() == 1);
}

TEST_CASE("concurrent callers are counted exactly") {
  QueryOracle o(victim());
  constexpr int threads = 8, per = 250;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&o, t] {
      std::mt19937_64 rng(static_cast<std::uint64_t>(t));
      for (int i = 0; i < per; ++i) {
        if (i % 5 == 0)
          o.query_batch(testutil::random_vector(18, rng), 2);
        else
          o.query(testutil::random_vector(9, rng));
      }
    });
  for (auto& th : pool) th.join();
  CHECK(o.query_count() == threads * (per + per / 5));
}

TEST_CASE("attacks see only the abstract interface") {
  QueryOracle q(victim());
  Oracle& o = q;
  o.query(Image(9, 0.1));
  CHECK(o.query_count() == 1);
  CHECK(q.classes() == 4);
  CHECK(q.image_size() == 9);
}
