#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "npattack/error.hpp"
#include "npattack/harness.hpp"

using namespace npattack;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("npattack_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentSpec tiny_spec(const fs::path& dir) {
  ExperimentSpec s;
  s.name = "tiny";
  s.seed = 5;
  s.out_dir = dir;
  s.data.synth.height = 6;
  s.data.synth.width = 6;
  s.data.synth.samples = 120;
  s.data.synth_test_samples = 40;
  s.victim.hidden = {16};
  s.victim.train.epochs = 15;
  s.victim.train.batch = 16;
  s.victim.checkpoint = dir / "victim.clf";
  s.np.checkpoint = dir / "np.anp";
  s.np.hidden = s.np.d_r = s.np.d_z = 8;
  s.np.train.epochs = 1;
  s.np.train_images = 10;
  s.attack.samples = 6;
  s.attack.max_iterations = 8;
  s.eval.size = 6;
  s.eval.curve_budgets = {10, 20, 40};
  s.eval.guard = true;
  return s;
}

struct Fixture {
  fs::path dir = scratch("fixture");
  ExperimentSpec spec = tiny_spec(dir);
  Classifier victim;
  AnpParameters np;
  LabeledImages test;

  Fixture() {
    train_victim(spec, victim);
    train_np_model(spec, np);
    test = load_split(spec.data, "test");
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

int run_cli(const std::string& args) {
  const char* cli = std::getenv("NPATTACK_CLI");
  REQUIRE(cli != nullptr);
  const int status = std::system((std::string(cli) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("metrics aggregate over successes") {
  std::vector<ImageRecord> rs(4);
  rs[0] = {0, 1, -1, true, 100, 4, 2.0, 0.2};
  rs[1] = {1, 2, -1, true, 300, 10, 4.0, 0.1};
  rs[2] = {2, 0, -1, false, 900, 30, 9.0, 0.2};
  rs[3] = {3, 1, -1, true, 200, 7, 3.0, 0.15};
  const MetricsRow m = aggregate("x", rs, 3);
  CHECK(m.asr == 0.75);
  CHECK(m.mean_l2 == doctest::Approx(3.0));
  CHECK(m.max_linf == 0.2);
  CHECK(m.mean_queries == 200.0);
  CHECK(m.median_queries == 200.0);
  CHECK(m.eval_size == 4);
  const MetricsRow none = aggregate("x", std::span<const ImageRecord>(rs).subspan(2, 1), 3);
  CHECK(none.asr == 0.0);
  CHECK(none.mean_queries == 0.0);
}

TEST_CASE("CSV files round-trip exactly") {
  const auto dir = scratch("csv");
  std::vector<ImageRecord> rs{{3, 1, 2, true, 1234, 41, 0.1 + 0.2, 1.0 / 3.0}, {9, 0, -1, false, 27000, 900, 1e-300, 0.2}};
  write_records_csv(dir / "r.csv", rs);
  CHECK(read_records_csv(dir / "r.csv") == rs);
  std::vector<MetricsRow> ms{{"np_attack_R", 0.985, 3.0000000000000004, 0.2, 1226.5, 1190, 200, 7}};
  write_metrics_csv(dir / "m.csv", ms);
  CHECK(read_metrics_csv(dir / "m.csv") == ms);
  CHECK(slurp(dir / "m.csv").rfind("method,asr,mean_l2,max_linf,mean_queries,median_queries,eval_size,seed\n", 0) == 0);
  std::ofstream(dir / "bad.csv") << "nonsense\n";
  CHECK_THROWS_AS(read_records_csv(dir / "bad.csv"), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("spec loading validates keys, values and paths") {
  const auto dir = scratch("spec");
  std::ofstream(dir / "ok.cfg") << "name = a\nseed = 3\nattack.variant = Z\nattack.sigma_mode = fixed\n"
                                   "attack.sigma_prime = 2\neval.size = 10\neval.curve_budgets = 10,20\n";
  const ExperimentSpec s = load_spec(dir / "ok.cfg");
  CHECK(s.attack.variant == Variant::Z);
  CHECK(s.attack.sigma_mode == SigmaMode::Fixed);
  CHECK(s.eval.curve_budgets == std::vector<std::uint64_t>{10, 20});
  CHECK(s.victim.checkpoint == dir / "out" / "victim.clf");
  CHECK(s.pixel_nes.sigma_pix == doctest::Approx(0.02));

  std::ofstream(dir / "typo.cfg") << "atack.eta = 1\n";
  CHECK_THROWS_AS(load_spec(dir / "typo.cfg"), ParseError);
  std::ofstream(dir / "variant.cfg") << "attack.variant = Q\n";
  CHECK_THROWS_AS(load_spec(dir / "variant.cfg"), ParseError);
  std::ofstream(dir / "size.cfg") << "eval.size = 0\n";
  CHECK_THROWS_AS(load_spec(dir / "size.cfg"), ParseError);
  std::ofstream(dir / "missing.cfg") << "data.source = idx\ndata.train_images = a\ndata.train_labels = b\n"
                                        "data.test_images = c\ndata.test_labels = d\n";
  CHECK_THROWS_AS(load_spec(dir / "missing.cfg"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("evaluation set is seeded, ordered and filtered") {
  Fixture& f = fixture();
  const auto a = select_evaluation_set(f.victim, f.test, 5, 1);
  const auto b = select_evaluation_set(f.victim, f.test, 5, 1);
  CHECK(a == b);
  CHECK(a.size() == 5);
  CHECK(std::is_sorted(a.begin(), a.end()));
  for (std::size_t i : a) CHECK(predict(f.victim, f.test.images[i]) == f.test.labels[i]);
  CHECK(select_evaluation_set(f.victim, f.test, 5, 2) != a);

  LabeledImages wrong = f.test;
  for (std::size_t i = 0; i < wrong.size(); ++i) wrong.labels[i] = (predict(f.victim, wrong.images[i]) + 1) % 4;
  try {
    select_evaluation_set(f.victim, wrong, 5, 1);
    FAIL("expected an error");
  } catch (const ContractViolation& e) {
    CHECK(std::string(e.what()).find("no correctly classified images") != std::string::npos);
  }
}

TEST_CASE("campaign outputs are consistent and byte-identical across runs") {
  Fixture& f = fixture();
  for (Method m : {Method::NpAttack, Method::PixelNes, Method::CoordinateFd}) {
    CAPTURE(method_name(m));
    ExperimentSpec spec = f.spec;
    spec.method = m;
    spec.pixel_nes.max_iterations = 8;
    spec.pixel_nes.samples = 6;
    spec.coordinate_fd.budget = 48;
    spec.out_dir = f.dir / "run1";
    const ExperimentOutcome o1 = run_experiment(spec, f.victim, &f.np, f.test);
    write_outcome(spec, o1);
    spec.out_dir = f.dir / "run2";
    const ExperimentOutcome o2 = run_experiment(spec, f.victim, &f.np, f.test);
    write_outcome(spec, o2);
    for (const char* suffix : {"_results.csv", "_metrics.csv", "_curve.csv", "_curve.svg"})
      CHECK(slurp(f.dir / "run1" / (spec.name + suffix)) == slurp(f.dir / "run2" / (spec.name + suffix)));

    const auto records = read_records_csv(f.dir / "run1" / "tiny_results.csv");
    CHECK(records.size() == spec.eval.size);
    CHECK(aggregate(o1.metrics.method, records, spec.seed) == read_metrics_csv(f.dir / "run1" / "tiny_metrics.csv")[0]);
    std::uint64_t total = 0;
    for (const ImageRecord& r : records) total += r.queries_used;
    CHECK(total == o1.oracle_queries);
    CHECK(o1.guard_violations == 0);
    CHECK(o1.metrics.max_linf <= spec.epsilon() + 1e-12);
    for (const AttackResult& r : o1.results)
      if (r.success) CHECK(predict(f.victim, r.adversarial) != f.test.labels[o1.records[&r - o1.results.data()].image_index]);
  }
}

TEST_CASE("targeted campaigns attack every other class") {
  Fixture& f = fixture();
  ExperimentSpec spec = f.spec;
  spec.eval.targeted = true;
  spec.eval.size = 2;
  const ExperimentOutcome o = run_experiment(spec, f.victim, &f.np, f.test);
  REQUIRE(o.records.size() == 2 * 3);
  for (const ImageRecord& r : o.records) {
    CHECK(r.target >= 0);
    CHECK(r.target != r.label);
  }
}

TEST_CASE("dimension mismatches are reported before any attack") {
  Fixture& f = fixture();
  const Classifier other = init_classifier({5, 5, 1}, {4}, 4, 1);
  CHECK_THROWS_AS(run_experiment(f.spec, other, &f.np, f.test), ContractViolation);
  AnpArch arch;
  arch.image = {5, 5, 1};
  arch.hidden = arch.d_r = arch.d_z = 4;
  const AnpParameters small = init_anp(arch, 1);
  CHECK_THROWS_AS(run_experiment(f.spec, f.victim, &small, f.test), ContractViolation);
}

TEST_CASE("compare lines up rows and refuses mismatched specs") {
  Fixture& f = fixture();
  std::vector<ExperimentSpec> specs{f.spec, f.spec};
  specs[1].name = "tiny_copy";
  const ExperimentOutcome o = run_experiment(f.spec, f.victim, &f.np, f.test);
  const std::vector<ExperimentOutcome> os{o, o};
  const Comparison c = compare(specs, os);
  REQUIRE(c.rows.size() == 2);
  MetricsRow a = c.rows[0], b = c.rows[1];
  a.method = b.method = "";
  CHECK(a == b);
  CHECK(c.curves[0].values == c.curves[1].values);
  write_comparison(f.dir, c, true);
  CHECK(fs::exists(f.dir / "comparison.csv"));

  specs[1].attack.epsilon = 0.3;
  specs[1].seed = 99;
  const auto diff = shared_field_diff(specs[0], specs[1]);
  CHECK(diff == std::vector<std::string>{"attack.epsilon", "seed"});
  try {
    compare(specs, os);
    FAIL("expected refusal");
  } catch (const ContractViolation& e) {
    CHECK(std::string(e.what()).find("attack.epsilon") != std::string::npos);
  }
}

TEST_CASE("reconstruction gap at zero epsilon coincides and is deterministic") {
  Fixture& f = fixture();
  LabeledImages few = f.test;
  few.images.resize(5);
  few.labels.resize(5);
  const ReconstructionGap g0 = reconstruction_gap(f.np, f.victim, few, 0.0, 5, 1);
  CHECK(g0.adversarial_mse == g0.noised_mse);
  CHECK(g0.adversarial_mse == g0.benign_mse);
  const ReconstructionGap a = reconstruction_gap(f.np, f.victim, few, 0.2, 5, 1);
  const ReconstructionGap b = reconstruction_gap(f.np, f.victim, few, 0.2, 5, 1);
  CHECK(a.adversarial_mse == b.adversarial_mse);
  CHECK(a.noised_mse == b.noised_mse);
  CHECK(a.images == 5);
}

TEST_CASE("CLI exit codes") {
  Fixture& f = fixture();
  const auto dir = scratch("cli");
  std::ofstream(dir / "ok.cfg") << "name = cli\nsynth.height = 6\nsynth.width = 6\nsynth.train_samples = 40\n"
                                   "victim.hidden = 8\nvictim.epochs = 2\n";
  CHECK(run_cli("train-target --config " + (dir / "ok.cfg").string() + " --out-dir " + dir.string()) == 0);
  CHECK(fs::exists(dir / "victim.clf"));
  CHECK(run_cli("train-target --config " + (dir / "absent.cfg").string()) == 2);
  std::ofstream(dir / "bad.cfg") << "bogus.key = 1\n";
  CHECK(run_cli("attack --config " + (dir / "bad.cfg").string()) == 2);
  save_classifier(init_classifier({5, 5, 1}, {4}, 4, 1), dir / "wrong.clf");
  std::ofstream(dir / "mismatch.cfg") << "synth.height = 6\nsynth.width = 6\nvictim.checkpoint = wrong.clf\n"
                                         "attack.method = pixel_nes\n";
  CHECK(run_cli("attack --config " + (dir / "mismatch.cfg").string()) == 1);
  CHECK(run_cli("no-such-command") == 2);
  (void)f;
  fs::remove_all(dir);
}
