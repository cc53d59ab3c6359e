#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "helpers.hpp"
#include "npattack/classifier.hpp"
#include "npattack/error.hpp"

using namespace npattack;

namespace {

LabeledImages small_synth(std::size_t samples, std::uint64_t seed) {
  SynthSpec s;
  s.height = 8;
  s.width = 8;
  s.samples = samples;
  s.seed = seed;
  return synth_dataset(s);
}

}  // namespace

TEST_CASE("log probabilities normalize") {
  const Classifier clf = init_classifier({4, 4, 1}, {8}, 3, 1);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 5; ++i) {
    const auto lp = log_probabilities(clf, testutil::random_vector(16, rng));
    REQUIRE(lp.size() == 3);
    double s = 0.0;
    for (double v : lp) s += std::exp(v);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("batch and single forward agree") {
  const Classifier clf = init_classifier({4, 4, 1}, {8, 6}, 3, 1);
  std::mt19937_64 rng(3);
  Tensor batch = testutil::random_tensor({5, 16}, rng, 0, 1);
  const Tensor lp = log_probabilities(clf, batch);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto one = log_probabilities(clf, batch.values().subspan(i * 16, 16));
    for (std::size_t c = 0; c < 3; ++c) CHECK(lp.at(i, c) == one[c]);
  }
}

TEST_CASE("one example per class is memorized") {
  LabeledImages d = small_synth(4, 5);
  for (int c = 0; c < 4; ++c) d.labels[c] = c;
  Classifier clf = init_classifier(d.shape, {32}, 4, 6);
  TrainClassifierOptions o;
  o.epochs = 300;
  o.batch = 4;
  o.lr = 1e-2;
  const auto r = train_classifier(clf, d, d, o);
  CHECK(r.train_accuracy == 1.0);
}

TEST_CASE("a three-layer MLP separates the four-class synthetic set") {
  const LabeledImages train = small_synth(400, 7);
  SynthSpec ts;
  ts.height = ts.width = 8;
  ts.samples = 200;
  ts.seed = 8;
  const LabeledImages test = synth_dataset(ts);
  Classifier clf = init_classifier(train.shape, {64, 32}, 4, 9);
  TrainClassifierOptions o;
  o.epochs = 20;
  o.batch = 32;
  const auto r = train_classifier(clf, train, test, o);
  CHECK(r.test_accuracy >= 0.99);
  CHECK(r.epoch_loss.size() == 20);
}

TEST_CASE("training is reproducible and rejects a single class") {
  const LabeledImages d = small_synth(40, 10);
  Classifier a = init_classifier(d.shape, {16}, 4, 11);
  Classifier b = init_classifier(d.shape, {16}, 4, 11);
  TrainClassifierOptions o;
  o.epochs = 3;
  o.batch = 8;
  train_classifier(a, d, d, o);
  train_classifier(b, d, d, o);
  for (std::size_t i = 0; i < a.tensors().size(); ++i) CHECK(a.tensors()[i]->storage() == b.tensors()[i]->storage());

  LabeledImages one = d;
  one.classes = 1;
  for (int& y : one.labels) y = 0;
  Classifier c = init_classifier(d.shape, {16}, 4, 11);
  CHECK_THROWS_AS(init_classifier(d.shape, {16}, 1, 11), ContractViolation);
  CHECK_THROWS_AS(train_classifier(c, one, one, o), ContractViolation);
}

TEST_CASE("input gradient matches finite differences") {
  const Classifier clf = init_classifier({3, 3, 1}, {7}, 3, 12);
  std::mt19937_64 rng(13);
  Image x = testutil::random_vector(9, rng);
  const auto g = input_gradient(clf, x, 1);
  for (std::size_t i = 0; i < 9; ++i) {
    const double h = 1e-6;
    Image xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (-log_probabilities(clf, xp)[1] + log_probabilities(clf, xm)[1]) / (2 * h);
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("FGSM and PGD respect the ball and box") {
  const Classifier clf = init_classifier({4, 4, 1}, {8}, 3, 14);
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const Image x = testutil::random_vector(16, rng);
    CHECK(fgsm_attack(clf, x, 0, 0.0) == x);
    for (std::size_t steps : {1u, 5u}) {
      const Image a = fgsm_attack(clf, x, trial % 3, 0.2, steps);
      for (std::size_t i = 0; i < 16; ++i) {
        CHECK(std::abs(a[i] - x[i]) <= 0.2);
        CHECK(a[i] >= 0.0);
        CHECK(a[i] <= 1.0);
      }
    }
  }
}

TEST_CASE("classifier checkpoint round trip") {
  const Classifier clf = init_classifier({4, 4, 1}, {8, 5}, 3, 16);
  const auto path = std::filesystem::temp_directory_path() / "npattack_test_clf.bin";
  save_classifier(clf, path);
  const Classifier back = load_classifier(path);
  CHECK(back.widths == clf.widths);
  CHECK(back.image == clf.image);
  for (std::size_t i = 0; i < clf.tensors().size(); ++i)
    CHECK(back.tensors()[i]->storage() == clf.tensors()[i]->storage());
  std::filesystem::remove(path);
}
