#include "npattack/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>

#include "npattack/autodiff.hpp"
#include "npattack/checkpoint.hpp"
#include "npattack/error.hpp"
#include "npattack/kernels.hpp"
#include "npattack/optim.hpp"

namespace npattack {
namespace {

constexpr std::array<char, 4> kClfMagic{'C', 'L', 'F', '1'};

ad::Var logits(ad::Tape& tape, Classifier& clf, ad::Var x) {
  for (std::size_t k = 0; k < clf.layers.size(); ++k) {
    x = ad::affine(x, tape.leaf(clf.layers[k].w), tape.leaf(clf.layers[k].b));
    if (k + 1 < clf.layers.size()) x = ad::relu(x);
  }
  return x;
}

// Mean cross-entropy of log-probabilities against integer labels.
ad::Var cross_entropy(ad::Tape& tape, ad::Var logp, std::span<const int> labels) {
  Tensor onehot(Shape{labels.size(), logp.cols()});
  for (std::size_t i = 0; i < labels.size(); ++i) onehot.at(i, labels[i]) = -1.0 / static_cast<double>(labels.size());
  return ad::sum(ad::mul(logp, tape.constant(std::move(onehot))));
}

}  // namespace

std::vector<Tensor*> Classifier::tensors() {
  std::vector<Tensor*> out;
  for (Linear& l : layers) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  return out;
}

std::vector<const Tensor*> Classifier::tensors() const {
  auto ts = const_cast<Classifier*>(this)->tensors();
  return {ts.begin(), ts.end()};
}

Classifier init_classifier(const ImageShape& image, std::vector<std::size_t> hidden, int classes, std::uint64_t seed) {
  NPATTACK_REQUIRE(classes >= 2, "classifier needs at least two classes");
  NPATTACK_REQUIRE(image.size() >= 1, "classifier input is empty");
  Classifier clf;
  clf.image = image;
  clf.widths.push_back(image.size());
  for (std::size_t h : hidden) {
    NPATTACK_REQUIRE(h >= 1, "hidden widths must be positive");
    clf.widths.push_back(h);
  }
  clf.widths.push_back(static_cast<std::size_t>(classes));
  std::mt19937_64 rng = derived_rng(seed, 0xC1F);
  for (std::size_t k = 0; k + 1 < clf.widths.size(); ++k) {
    const std::size_t in = clf.widths[k], out = clf.widths[k + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Linear l{Tensor(Shape{in, out}), Tensor(Shape{1, out})};
    for (double& v : l.w.values()) v = u(rng);
    for (double& v : l.b.values()) v = u(rng);
    clf.layers.push_back(std::move(l));
  }
  return clf;
}

Tensor log_probabilities(const Classifier& clf, const Tensor& batch) {
  NPATTACK_REQUIRE(batch.cols() == clf.widths.front(), "classifier: input width mismatch");
  Tensor h = batch;
  for (std::size_t k = 0; k < clf.layers.size(); ++k) {
    const Linear& l = clf.layers[k];
    Tensor out(Shape{h.rows(), l.out()});
    for (std::size_t i = 0; i < h.rows(); ++i)
      std::copy(l.b.values().begin(), l.b.values().end(), out.values().begin() + i * l.out());
    kernels::matmul(h.cview(), l.w.view(), out.view(), true);
    if (k + 1 < clf.layers.size())
      for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    h = std::move(out);
  }
  const std::size_t m = h.cols();
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double* row = h.values().data() + i * m;
    const double peak = *std::max_element(row, row + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(row[j] - peak);
    const double lse = peak + std::log(total);
    for (std::size_t j = 0; j < m; ++j) row[j] -= lse;
  }
  return h;
}

std::vector<double> log_probabilities(const Classifier& clf, std::span<const double> image) {
  const Tensor batch(Shape{1, image.size()}, std::vector<double>(image.begin(), image.end()));
  const Tensor lp = log_probabilities(clf, batch);
  return {lp.values().begin(), lp.values().end()};
}

int predict(const Classifier& clf, std::span<const double> image) {
  const auto lp = log_probabilities(clf, image);
  return static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
}

double accuracy(const Classifier& clf, const LabeledImages& data) {
  NPATTACK_REQUIRE(data.size() >= 1, "accuracy: empty dataset");
  const std::size_t d = data.shape.size();
  std::size_t correct = 0;
  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    Tensor batch(Shape{n, d});
    for (std::size_t i = 0; i < n; ++i) std::copy(data.images[start + i].begin(), data.images[start + i].end(), batch.values().begin() + i * d);
    const Tensor lp = log_probabilities(clf, batch);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = lp.values().data() + i * lp.cols();
      const int pred = static_cast<int>(std::max_element(row, row + lp.cols()) - row);
      correct += pred == data.labels[start + i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainClassifierResult train_classifier(Classifier& clf, const LabeledImages& train, const LabeledImages& test,
                                       const TrainClassifierOptions& o) {
  NPATTACK_REQUIRE(train.size() >= 1, "train_classifier: empty dataset");
  NPATTACK_REQUIRE(train.shape == clf.image, "train_classifier: image shape mismatch");
  NPATTACK_REQUIRE(o.batch >= 1 && o.epochs >= 1, "train_classifier: batch and epochs must be positive");
  std::vector<int> seen(static_cast<std::size_t>(clf.classes()), 0);
  for (int y : train.labels) {
    NPATTACK_REQUIRE(y >= 0 && y < clf.classes(), "train_classifier: label out of range");
    seen[static_cast<std::size_t>(y)] = 1;
  }
  NPATTACK_REQUIRE(std::accumulate(seen.begin(), seen.end(), 0) >= 2, "train_classifier: dataset has a single class");

  Adam adam(clf.tensors(), AdamOptions{o.lr});
  const std::size_t d = clf.image.size();
  std::vector<std::size_t> order(train.size());
  TrainClassifierResult res;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng = derived_rng(o.seed, 0xC1A55, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += o.batch) {
      const std::size_t n = std::min(o.batch, order.size() - start);
      Tensor x(Shape{n, d});
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = order[start + i];
        std::copy(train.images[j].begin(), train.images[j].end(), x.values().begin() + i * d);
        y[i] = train.labels[j];
      }
      adam.zero_grad();
      ad::Tape tape;
      const ad::Var loss = cross_entropy(tape, ad::log_softmax_rows(logits(tape, clf, tape.constant(std::move(x)))), y);
      tape.backward(loss);
      adam.step();
      total += loss.value().item();
      ++batches;
    }
    res.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  for (Tensor* t : clf.tensors()) t->drop_grad();
  res.train_accuracy = accuracy(clf, train);
  res.test_accuracy = test.size() > 0 ? accuracy(clf, test) : 0.0;
  return res;
}

std::vector<double> input_gradient(const Classifier& clf, std::span<const double> image, int label) {
  NPATTACK_REQUIRE(label >= 0 && label < clf.classes(), "input_gradient: label out of range");
  NPATTACK_REQUIRE(image.size() == clf.widths.front(), "input_gradient: image size mismatch");
  Classifier& mutable_clf = const_cast<Classifier&>(clf);
  Tensor x(Shape{1, image.size()}, std::vector<double>(image.begin(), image.end()));
  ad::Tape tape(ad::GradientSink::TapeOnly);
  const ad::Var xv = tape.leaf(x);
  const std::array<int, 1> y{label};
  const ad::Var loss = cross_entropy(tape, ad::log_softmax_rows(logits(tape, mutable_clf, xv)), y);
  tape.backward(loss);
  const auto g = tape.leaf_gradient(x);
  return {g.begin(), g.end()};
}

Image fgsm_attack(const Classifier& clf, const Image& image, int label, double epsilon, std::size_t steps) {
  NPATTACK_REQUIRE(epsilon >= 0.0, "fgsm_attack: epsilon must be non-negative");
  NPATTACK_REQUIRE(steps >= 1, "fgsm_attack: need at least one step");
  Image x = image;
  if (epsilon == 0.0) return x;
  const double alpha = epsilon / static_cast<double>(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const auto g = input_gradient(clf, x, label);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double sign = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      const PixelBox box = linf_box(image[i], epsilon);
      x[i] = std::clamp(x[i] + alpha * sign, box.lo, box.hi);
    }
  }
  return x;
}

void save_classifier(const Classifier& clf, const std::filesystem::path& path) {
  Container c;
  c.magic = kClfMagic;
  c.header = {1, clf.image.height, clf.image.width, clf.image.channels, clf.widths.size()};
  c.header.insert(c.header.end(), clf.widths.begin(), clf.widths.end());
  for (const Tensor* t : clf.tensors()) {
    Tensor copy = *t;
    copy.drop_grad();
    c.tensors.push_back(std::move(copy));
  }
  write_container(c, path);
}

Classifier load_classifier(const std::filesystem::path& path) {
  Container c = read_container(path, kClfMagic);
  if (c.header.size() < 5 || c.header[0] != 1) throw ParseError("CLF1: bad architecture descriptor", 4);
  const std::size_t nw = c.header[4];
  if (nw < 2 || c.header.size() != 5 + nw) throw ParseError("CLF1: width table has wrong length", 4);
  const ImageShape image{c.header[1], c.header[2], c.header[3]};
  std::vector<std::size_t> widths(c.header.begin() + 5, c.header.end());
  if (widths.front() != image.size()) throw ParseError("CLF1: input width does not match image shape", 4);
  if (widths.back() < 2 || widths.back() > 1'000'000) throw ParseError("CLF1: bad class count", 4);
  for (std::size_t w : widths)
    if (w == 0 || w > 1'000'000) throw ParseError("CLF1: bad layer width", 4);
  Classifier clf = init_classifier(image, std::vector<std::size_t>(widths.begin() + 1, widths.end() - 1),
                                   static_cast<int>(widths.back()), 0);
  check_shape_table(c.tensors, std::as_const(clf).tensors());
  auto ts = clf.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) *ts[i] = std::move(c.tensors[i]);
  return clf;
}

}  // namespace npattack
