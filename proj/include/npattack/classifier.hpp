#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "npattack/anp.hpp"
#include "npattack/image.hpp"
#include "npattack/tensor.hpp"

namespace npattack {

// Fully connected relu network ending in class logits.
struct Classifier {
  ImageShape image;
  std::vector<std::size_t> widths;  // input, hidden..., classes
  std::vector<Linear> layers;

  int classes() const { return static_cast<int>(widths.back()); }

  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

Classifier init_classifier(const ImageShape& image, std::vector<std::size_t> hidden, int classes, std::uint64_t seed);

// Row-wise log-softmax of the logits for a batch of images (n×d row-major).
Tensor log_probabilities(const Classifier& clf, const Tensor& batch);
std::vector<double> log_probabilities(const Classifier& clf, std::span<const double> image);
int predict(const Classifier& clf, std::span<const double> image);
double accuracy(const Classifier& clf, const LabeledImages& data);

struct TrainClassifierOptions {
  std::size_t epochs = 20;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct TrainClassifierResult {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

TrainClassifierResult train_classifier(Classifier& clf, const LabeledImages& train, const LabeledImages& test,
                                       const TrainClassifierOptions& options);

// Gradient of cross-entropy wrt the input pixels.
std::vector<double> input_gradient(const Classifier& clf, std::span<const double> image, int label);

// White-box sign-gradient attack. steps == 1 is FGSM; steps > 1 takes steps of
// epsilon/steps, re-projecting into the epsilon ball and [0,1] after each.
Image fgsm_attack(const Classifier& clf, const Image& image, int label, double epsilon, std::size_t steps = 1);

void save_classifier(const Classifier& clf, const std::filesystem::path& path);
Classifier load_classifier(const std::filesystem::path& path);

}  // namespace npattack
