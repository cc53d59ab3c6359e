#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "npattack/error.hpp"
#include "npattack/harness.hpp"

using namespace npattack;

namespace {

struct Common {
  std::vector<std::string> configs;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c, bool many) {
  auto* opt = cmd->add_option("--config", c.configs, "experiment config file")->required()->check(CLI::ExistingFile);
  if (!many) opt->expected(1);
  cmd->add_option("--seed", c.seed, "override the experiment seed");
  cmd->add_option("--out-dir", c.out_dir, "override output.dir");
  cmd->add_option("--set", c.sets, "override any config key (key=value)");
}

ExperimentSpec spec_from(const std::string& path, const Common& c) {
  Config cfg = Config::load(path);
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParseError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  if (!c.out_dir.empty()) cfg.set("output.dir", c.out_dir);
  return load_spec(cfg);
}

void print_metrics(const MetricsRow& m) {
  std::printf("%-22s asr=%.4f l2=%.4f linf=%.4f mean_q=%.1f median_q=%.1f n=%zu seed=%llu\n", m.method.c_str(),
              m.asr, m.mean_l2, m.max_linf, m.mean_queries, m.median_queries, m.eval_size,
              static_cast<unsigned long long>(m.seed));
}

int cmd_train_target(const Common& c) {
  const ExperimentSpec spec = spec_from(c.configs.front(), c);
  Classifier clf;
  const TrainClassifierResult r = train_victim(spec, clf);
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) std::printf("epoch %zu loss %.6f\n", e + 1, r.epoch_loss[e]);
  std::printf("train accuracy %.4f\ntest accuracy %.4f\nwrote %s\n", r.train_accuracy, r.test_accuracy,
              spec.victim.checkpoint.string().c_str());
  return 0;
}

int cmd_train_np(const Common& c) {
  ExperimentSpec spec = spec_from(c.configs.front(), c);
  spec.np.train.on_epoch = [](std::size_t e, double loss) {
    std::printf("epoch %zu loss %.6f\n", e + 1, loss);
    std::fflush(stdout);
  };
  AnpParameters np;
  train_np_model(spec, np);
  const LabeledImages test = load_split(spec.data, "test");
  double mse = 0.0;
  const std::size_t n = std::min<std::size_t>(test.size(), 200);
  for (std::size_t i = 0; i < n; ++i) mse += reconstruction_mse(np, test.images[i]);
  std::printf("test reconstruction mse %.6f over %zu images\nwrote %s\n", n ? mse / static_cast<double>(n) : 0.0, n,
              spec.np.checkpoint.string().c_str());
  return 0;
}

int cmd_attack(const Common& c) {
  const ExperimentSpec spec = spec_from(c.configs.front(), c);
  const ExperimentOutcome o = run_experiment(spec);
  write_outcome(spec, o);
  print_metrics(o.metrics);
  std::printf("oracle queries %llu\n", static_cast<unsigned long long>(o.oracle_queries));
  if (spec.eval.guard)
    std::printf("guard violations %llu\n", static_cast<unsigned long long>(o.guard_violations));
  return 0;
}

int cmd_compare(const Common& c) {
  std::vector<ExperimentSpec> specs;
  for (const std::string& p : c.configs) specs.push_back(spec_from(p, c));
  const Comparison cmp = compare(specs);
  write_comparison(specs.front().out_dir, cmp, specs.front().write_svg);
  for (const MetricsRow& m : cmp.rows) print_metrics(m);
  return 0;
}

int cmd_recon_gap(const Common& c) {
  const ExperimentSpec spec = spec_from(c.configs.front(), c);
  LabeledImages test = load_split(spec.data, "test");
  if (spec.recon.images < test.size()) {
    test.images.resize(spec.recon.images);
    test.labels.resize(spec.recon.images);
  }
  const AnpParameters np = load_anp(spec.np.checkpoint);
  const Classifier victim = load_classifier(spec.victim.checkpoint);
  const ReconstructionGap g =
      reconstruction_gap(np, victim, test, spec.recon.epsilon, spec.recon.pgd_steps, spec.seed);
  std::printf("images %zu\nbenign mse %.6f\nadversarial mse %.6f\nnoised mse %.6f\n", g.images, g.benign_mse,
              g.adversarial_mse, g.noised_mse);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Black-box adversarial attacks driven by a pre-trained attentive neural process"};
  app.require_subcommand(1);
  Common common;
  struct Sub {
    const char* name;
    const char* help;
    int (*run)(const Common&);
    bool many;
  };
  const Sub subs[] = {
      {"train-target", "train the victim classifier", cmd_train_target, false},
      {"train-np", "pre-train the neural process on benign images", cmd_train_np, false},
      {"attack", "run an attack campaign and write metrics", cmd_attack, false},
      {"compare", "run several campaigns on a shared evaluation set", cmd_compare, true},
      {"recon-gap", "reconstruction error on adversarial vs noised inputs", cmd_recon_gap, false},
  };
  std::vector<std::pair<CLI::App*, const Sub*>> cmds;
  for (const Sub& s : subs) {
    CLI::App* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, common, s.many);
    cmds.emplace_back(cmd, &s);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    for (const auto& [cmd, sub] : cmds)
      if (cmd->parsed()) return sub->run(common);
  } catch (const ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << '\n';
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
