#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "npattack/anp.hpp"
#include "npattack/attack.hpp"
#include "npattack/baselines.hpp"
#include "npattack/classifier.hpp"
#include "npattack/config.hpp"
#include "npattack/image.hpp"

namespace npattack {

enum class Method { NpAttack, PixelNes, CoordinateFd };

const char* method_name(Method m);
Method parse_method(const std::string& s);

struct DataSpec {
  std::string source = "synthetic";  // idx | synthetic
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t downsample = 1;
  std::size_t limit_train = 0;  // 0 keeps everything
  std::size_t limit_test = 0;
  SynthSpec synth;
  std::size_t synth_test_samples = 200;
};

struct VictimSpec {
  std::filesystem::path checkpoint;
  std::vector<std::size_t> hidden{256, 128};
  TrainClassifierOptions train;
};

struct NpSpec {
  std::filesystem::path checkpoint;
  std::size_t hidden = 128;
  std::size_t d_r = 128;
  std::size_t d_z = 128;
  std::size_t train_images = 0;  // 0 uses the whole train split
  TrainNpOptions train;
};

struct EvalSpec {
  std::size_t size = 200;
  std::string split = "test";  // test | train
  bool targeted = false;
  std::vector<std::uint64_t> curve_budgets;
  bool guard = false;  // count queries outside the epsilon ball
};

struct ReconSpec {
  double epsilon = 0.2;
  std::size_t images = 200;
  std::size_t pgd_steps = 20;
};

struct ExperimentSpec {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  DataSpec data;
  VictimSpec victim;
  NpSpec np;
  Method method = Method::NpAttack;
  AttackConfig attack;
  PixelNesConfig pixel_nes;
  CoordinateFdConfig coordinate_fd;
  EvalSpec eval;
  ReconSpec recon;
  std::filesystem::path out_dir = "out";
  bool write_svg = true;

  double epsilon() const;
};

// Reads every known key and rejects the rest.
ExperimentSpec load_spec(Config& cfg);
ExperimentSpec load_spec(const std::filesystem::path& path);

LabeledImages load_split(const DataSpec& data, const std::string& split);

// Trains from the spec's train split and writes the checkpoint.
TrainClassifierResult train_victim(const ExperimentSpec& spec, Classifier& out);
TrainNpHistory train_np_model(const ExperimentSpec& spec, AnpParameters& out);

struct MetricsRow {
  std::string method;
  double asr = 0.0;
  double mean_l2 = 0.0;
  double max_linf = 0.0;
  double mean_queries = 0.0;
  double median_queries = 0.0;
  std::size_t eval_size = 0;
  std::uint64_t seed = 0;

  bool operator==(const MetricsRow&) const = default;
};

struct ImageRecord {
  std::size_t image_index = 0;
  int label = 0;
  int target = -1;
  bool success = false;
  std::uint64_t queries_used = 0;
  std::size_t iterations_run = 0;
  double l2 = 0.0;
  double linf = 0.0;

  bool operator==(const ImageRecord&) const = default;
};

// Means and median over successful attacks; zero when none succeeded.
MetricsRow aggregate(const std::string& method, std::span<const ImageRecord> records, std::uint64_t seed);

std::string format_double(double v);
void write_records_csv(const std::filesystem::path& path, std::span<const ImageRecord> records);
std::vector<ImageRecord> read_records_csv(const std::filesystem::path& path);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct Curve {
  std::string label;
  std::vector<double> values;
};

void write_curves_csv(const std::filesystem::path& path, std::span<const std::uint64_t> budgets,
                      std::span<const Curve> curves);
void write_curves_svg(const std::filesystem::path& path, std::span<const std::uint64_t> budgets,
                      std::span<const Curve> curves, const std::string& title);

// Correctly classified images of data, then a seeded sample without
// replacement that keeps dataset order.
std::vector<std::size_t> select_evaluation_set(const Classifier& clf, const LabeledImages& data, std::size_t size,
                                               std::uint64_t seed);

struct ExperimentOutcome {
  MetricsRow metrics;
  std::vector<ImageRecord> records;
  std::vector<AttackResult> results;
  std::vector<std::uint64_t> budgets;
  std::vector<double> curve;
  std::uint64_t oracle_queries = 0;
  std::uint64_t guard_violations = 0;
};

// In-memory form used by run_experiment; the overload without models loads
// the checkpoints named in the spec.
ExperimentOutcome run_experiment(const ExperimentSpec& spec, const Classifier& victim, const AnpParameters* np,
                                 const LabeledImages& data);
ExperimentOutcome run_experiment(const ExperimentSpec& spec);
void write_outcome(const ExperimentSpec& spec, const ExperimentOutcome& outcome);

// Differences in the fields that must agree across compared specs.
std::vector<std::string> shared_field_diff(const ExperimentSpec& a, const ExperimentSpec& b);

struct Comparison {
  std::vector<MetricsRow> rows;
  std::vector<std::uint64_t> budgets;
  std::vector<Curve> curves;
};

Comparison compare(std::span<const ExperimentSpec> specs, std::span<const ExperimentOutcome> outcomes);
Comparison compare(std::span<const ExperimentSpec> specs);
void write_comparison(const std::filesystem::path& out_dir, const Comparison& c, bool svg);

struct ReconstructionGap {
  double adversarial_mse = 0.0;
  double noised_mse = 0.0;
  double benign_mse = 0.0;
  std::size_t images = 0;
};

// Mean reconstruction MSE (reconstruction vs its own input) over white-box
// adversarial inputs (sign-gradient, pgd_steps steps) and over inputs with
// uniform noise in [-epsilon, epsilon], both clipped to [0,1].
ReconstructionGap reconstruction_gap(const AnpParameters& np, const Classifier& victim, const LabeledImages& images,
                                     double epsilon, std::size_t pgd_steps, std::uint64_t seed);

}  // namespace npattack
