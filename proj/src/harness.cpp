#include "npattack/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "npattack/error.hpp"

namespace npattack {
namespace {

std::vector<std::uint64_t> default_budgets() {
  std::vector<std::uint64_t> b;
  for (std::uint64_t q = 500; q <= 15000; q += 500) b.push_back(q);
  return b;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& where) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseError(where + ": bad number '" + s + "'");
  return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::uint64_t job_seed(std::uint64_t seed, std::size_t image, int target) {
  return derived_rng(seed, image, static_cast<std::uint64_t>(target + 1))();
}

constexpr const char* kRecordHeader = "image_index,label,target,success,queries_used,iterations_run,l2,linf";
constexpr const char* kMetricsHeader = "method,asr,mean_l2,max_linf,mean_queries,median_queries,eval_size,seed";

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::NpAttack: return "np_attack";
    case Method::PixelNes: return "pixel_nes";
    case Method::CoordinateFd: return "coordinate_fd";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "np_attack") return Method::NpAttack;
  if (s == "pixel_nes") return Method::PixelNes;
  if (s == "coordinate_fd") return Method::CoordinateFd;
  throw ParseError("unknown attack method '" + s + "' (expected np_attack, pixel_nes or coordinate_fd)");
}

double ExperimentSpec::epsilon() const {
  switch (method) {
    case Method::NpAttack: return attack.epsilon;
    case Method::PixelNes: return pixel_nes.epsilon;
    case Method::CoordinateFd: return coordinate_fd.epsilon;
  }
  return attack.epsilon;
}

ExperimentSpec load_spec(Config& c) {
  ExperimentSpec s;
  s.name = c.get_string("name", s.name);
  s.seed = c.get_uint("seed", s.seed);
  s.out_dir = c.get_path("output.dir", s.out_dir);
  s.write_svg = c.get_bool("output.svg", s.write_svg);

  DataSpec& d = s.data;
  d.source = c.get_string("data.source", d.source);
  if (d.source != "idx" && d.source != "synthetic") throw ParseError("data.source must be idx or synthetic");
  d.train_images = c.get_path("data.train_images");
  d.train_labels = c.get_path("data.train_labels");
  d.test_images = c.get_path("data.test_images");
  d.test_labels = c.get_path("data.test_labels");
  d.downsample = c.get_uint("data.downsample", d.downsample);
  d.limit_train = c.get_uint("data.limit_train", d.limit_train);
  d.limit_test = c.get_uint("data.limit_test", d.limit_test);
  d.synth.classes = static_cast<int>(c.get_uint("synth.classes", static_cast<std::uint64_t>(d.synth.classes)));
  d.synth.height = c.get_uint("synth.height", d.synth.height);
  d.synth.width = c.get_uint("synth.width", d.synth.width);
  d.synth.samples = c.get_uint("synth.train_samples", d.synth.samples);
  d.synth_test_samples = c.get_uint("synth.test_samples", d.synth_test_samples);
  d.synth.seed = c.get_uint("synth.seed", d.synth.seed);
  d.synth.noise = c.get_double("synth.noise", d.synth.noise);
  if (d.source == "idx") {
    for (const auto* p : {&d.train_images, &d.train_labels, &d.test_images, &d.test_labels}) {
      if (p->empty()) throw ParseError("data.source = idx needs data.train_images/labels and data.test_images/labels");
      if (!std::filesystem::exists(*p)) throw IoError("data file does not exist: " + p->string());
    }
  }

  VictimSpec& v = s.victim;
  v.checkpoint = c.get_path("victim.checkpoint", s.out_dir / "victim.clf");
  const auto hidden = c.get_uint_list("victim.hidden", {256, 128});
  v.hidden.assign(hidden.begin(), hidden.end());
  v.train.epochs = c.get_uint("victim.epochs", v.train.epochs);
  v.train.batch = c.get_uint("victim.batch", v.train.batch);
  v.train.lr = c.get_double("victim.lr", v.train.lr);
  v.train.seed = c.get_uint("victim.seed", v.train.seed);

  NpSpec& n = s.np;
  n.checkpoint = c.get_path("np.checkpoint", s.out_dir / "np.anp");
  n.hidden = c.get_uint("np.hidden", n.hidden);
  n.d_r = c.get_uint("np.d_r", n.d_r);
  n.d_z = c.get_uint("np.d_z", n.d_z);
  n.train_images = c.get_uint("np.train_images", n.train_images);
  n.train.epochs = c.get_uint("np.epochs", n.train.epochs);
  n.train.batch = c.get_uint("np.batch", n.train.batch);
  n.train.lr = c.get_double("np.lr", n.train.lr);
  n.train.context_min = c.get_double("np.context_min", n.train.context_min);
  n.train.context_max = c.get_double("np.context_max", n.train.context_max);
  n.train.seed = c.get_uint("np.seed", n.train.seed);

  s.method = parse_method(c.get_string("attack.method", method_name(s.method)));
  AttackConfig& a = s.attack;
  try {
    a.variant = parse_variant(c.get_string("attack.variant", variant_name(a.variant)));
    a.sigma_mode = parse_sigma_mode(c.get_string("attack.sigma_mode", sigma_mode_name(a.sigma_mode)));
  } catch (const ContractViolation& e) {
    throw ParseError(e.what());
  }
  a.epsilon = c.get_double("attack.epsilon", a.epsilon);
  a.max_iterations = c.get_uint("attack.iterations", a.max_iterations);
  a.samples = c.get_uint("attack.samples", a.samples);
  a.eta = c.get_double("attack.eta", a.eta);
  a.sigma_prime = c.get_double("attack.sigma_prime", a.sigma_prime);
  a.z_at_mean = c.get_bool("attack.z_at_mean", a.z_at_mean);
  a.z_independent = c.get_bool("attack.z_independent", a.z_independent);
  if (c.get_optional("attack.query_budget")) a.query_budget = c.get_uint("attack.query_budget", 0);

  PixelNesConfig& p = s.pixel_nes;
  p.epsilon = a.epsilon;
  p.max_iterations = c.get_uint("pixel_nes.iterations", p.max_iterations);
  p.samples = c.get_uint("pixel_nes.samples", a.samples);
  p.eta = c.get_double("pixel_nes.eta", p.eta);
  p.sigma_pix = c.get_double("pixel_nes.sigma_pix", 0.1 * a.epsilon);
  if (c.get_optional("pixel_nes.query_budget")) p.query_budget = c.get_uint("pixel_nes.query_budget", 0);

  CoordinateFdConfig& f = s.coordinate_fd;
  f.epsilon = a.epsilon;
  f.budget = c.get_uint("coordinate_fd.budget", f.budget);
  f.step = c.get_double("coordinate_fd.step", f.step);
  f.lr = c.get_double("coordinate_fd.lr", f.lr);
  f.block = c.get_uint("coordinate_fd.block", f.block);

  EvalSpec& e = s.eval;
  e.size = c.get_uint("eval.size", e.size);
  e.split = c.get_string("eval.split", e.split);
  if (e.split != "test" && e.split != "train") throw ParseError("eval.split must be test or train");
  e.targeted = c.get_bool("eval.targeted", e.targeted);
  e.curve_budgets = c.get_uint_list("eval.curve_budgets", default_budgets());
  e.guard = c.get_bool("eval.guard", e.guard);
  if (e.size < 1) throw ParseError("eval.size must be at least 1");
  a.targeted = p.targeted = f.targeted = e.targeted;

  ReconSpec& r = s.recon;
  r.epsilon = c.get_double("recon.epsilon", r.epsilon);
  r.images = c.get_uint("recon.images", r.images);
  r.pgd_steps = c.get_uint("recon.pgd_steps", r.pgd_steps);

  c.reject_unknown();
  return s;
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  Config c = Config::load(path);
  return load_spec(c);
}

LabeledImages load_split(const DataSpec& data, const std::string& split) {
  const bool train = split == "train";
  LabeledImages out;
  if (data.source == "idx") {
    out = train ? load_idx(data.train_images, data.train_labels) : load_idx(data.test_images, data.test_labels);
    out = downsample(out, data.downsample);
  } else {
    SynthSpec s = data.synth;
    if (!train) {
      s.samples = data.synth_test_samples;
      s.seed = derived_rng(data.synth.seed, 0x7E57)();
    }
    out = synth_dataset(s);
  }
  const std::size_t limit = train ? data.limit_train : data.limit_test;
  if (limit > 0 && limit < out.size()) {
    out.images.resize(limit);
    out.labels.resize(limit);
  }
  return out;
}

TrainClassifierResult train_victim(const ExperimentSpec& spec, Classifier& out) {
  const LabeledImages train = load_split(spec.data, "train");
  const LabeledImages test = load_split(spec.data, "test");
  NPATTACK_REQUIRE(train.shape == test.shape, "train and test splits have different image shapes");
  out = init_classifier(train.shape, spec.victim.hidden, train.classes, spec.victim.train.seed);
  TrainClassifierResult res = train_classifier(out, train, test, spec.victim.train);
  save_classifier(out, spec.victim.checkpoint);
  return res;
}

TrainNpHistory train_np_model(const ExperimentSpec& spec, AnpParameters& out) {
  LabeledImages train = load_split(spec.data, "train");
  if (spec.np.train_images > 0 && spec.np.train_images < train.size()) {
    train.images.resize(spec.np.train_images);
    train.labels.resize(spec.np.train_images);
  }
  AnpArch arch;
  arch.image = train.shape;
  arch.hidden = spec.np.hidden;
  arch.d_r = spec.np.d_r;
  arch.d_z = spec.np.d_z;
  out = init_anp(arch, spec.np.train.seed);
  TrainNpHistory h = train_np(out, train, spec.np.train);
  save_anp(out, spec.np.checkpoint);
  return h;
}

MetricsRow aggregate(const std::string& method, std::span<const ImageRecord> records, std::uint64_t seed) {
  MetricsRow m;
  m.method = method;
  m.eval_size = records.size();
  m.seed = seed;
  std::vector<double> queries;
  double l2 = 0.0;
  for (const ImageRecord& r : records) {
    if (!r.success) continue;
    queries.push_back(static_cast<double>(r.queries_used));
    l2 += r.l2;
    m.max_linf = std::max(m.max_linf, r.linf);
  }
  if (records.empty()) return m;
  m.asr = static_cast<double>(queries.size()) / static_cast<double>(records.size());
  if (queries.empty()) return m;
  const double n = static_cast<double>(queries.size());
  m.mean_l2 = l2 / n;
  m.mean_queries = std::accumulate(queries.begin(), queries.end(), 0.0) / n;
  std::sort(queries.begin(), queries.end());
  const std::size_t h = queries.size() / 2;
  m.median_queries = queries.size() % 2 ? queries[h] : 0.5 * (queries[h - 1] + queries[h]);
  return m;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw ContractViolation("format_double: conversion failed");
  return std::string(buf, ptr);
}

void write_records_csv(const std::filesystem::path& path, std::span<const ImageRecord> records) {
  auto out = open_out(path);
  out << kRecordHeader << '\n';
  for (const ImageRecord& r : records)
    out << r.image_index << ',' << r.label << ',' << r.target << ',' << (r.success ? 1 : 0) << ',' << r.queries_used
        << ',' << r.iterations_run << ',' << format_double(r.l2) << ',' << format_double(r.linf) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ImageRecord> read_records_csv(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != kRecordHeader) throw ParseError(path.string() + ": unexpected header");
  std::vector<ImageRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto c = split_csv_line(lines[i]);
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (c.size() != 8) throw ParseError(where + ": expected 8 columns");
    ImageRecord r;
    r.image_index = parse_number<std::size_t>(c[0], where);
    r.label = parse_number<int>(c[1], where);
    r.target = parse_number<int>(c[2], where);
    r.success = parse_number<int>(c[3], where) != 0;
    r.queries_used = parse_number<std::uint64_t>(c[4], where);
    r.iterations_run = parse_number<std::size_t>(c[5], where);
    r.l2 = parse_number<double>(c[6], where);
    r.linf = parse_number<double>(c[7], where);
    out.push_back(r);
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  auto out = open_out(path);
  out << kMetricsHeader << '\n';
  for (const MetricsRow& m : rows)
    out << m.method << ',' << format_double(m.asr) << ',' << format_double(m.mean_l2) << ','
        << format_double(m.max_linf) << ',' << format_double(m.mean_queries) << ','
        << format_double(m.median_queries) << ',' << m.eval_size << ',' << m.seed << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != kMetricsHeader) throw ParseError(path.string() + ": unexpected header");
  std::vector<MetricsRow> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto c = split_csv_line(lines[i]);
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (c.size() != 8) throw ParseError(where + ": expected 8 columns");
    MetricsRow m;
    m.method = c[0];
    m.asr = parse_number<double>(c[1], where);
    m.mean_l2 = parse_number<double>(c[2], where);
    m.max_linf = parse_number<double>(c[3], where);
    m.mean_queries = parse_number<double>(c[4], where);
    m.median_queries = parse_number<double>(c[5], where);
    m.eval_size = parse_number<std::size_t>(c[6], where);
    m.seed = parse_number<std::uint64_t>(c[7], where);
    out.push_back(m);
  }
  return out;
}

void write_curves_csv(const std::filesystem::path& path, std::span<const std::uint64_t> budgets,
                      std::span<const Curve> curves) {
  auto out = open_out(path);
  out << "budget";
  for (const Curve& c : curves) out << ',' << c.label;
  out << '\n';
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    out << budgets[i];
    for (const Curve& c : curves) {
      NPATTACK_REQUIRE(c.values.size() == budgets.size(), "curve length does not match budgets");
      out << ',' << format_double(c.values[i]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_curves_svg(const std::filesystem::path& path, std::span<const std::uint64_t> budgets,
                      std::span<const Curve> curves, const std::string& title) {
  NPATTACK_REQUIRE(!budgets.empty(), "svg: no budgets");
  constexpr double W = 640, H = 420, L = 60, R = 160, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  const double xmax = static_cast<double>(*std::max_element(budgets.begin(), budgets.end()));
  auto px = [&](double q) { return L + (xmax > 0 ? q / xmax : 0.0) * pw; };
  auto py = [&](double f) { return T + (1.0 - f) * ph; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << L << "\" y=\"24\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0;
    out << "<text x=\"" << L - 8 << "\" y=\"" << py(f) + 4 << "\" text-anchor=\"end\">" << format_double(f)
        << "</text>\n";
    const double q = xmax * f;
    out << "<text x=\"" << px(q) << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"middle\">"
        << static_cast<std::uint64_t>(std::llround(q)) << "</text>\n";
  }
  out << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">queries</text>\n";
  out << "<text x=\"16\" y=\"" << T + ph / 2 << "\" transform=\"rotate(-90 16 " << T + ph / 2
      << ")\" text-anchor=\"middle\">success fraction</text>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const char* color = colors[c % std::size(colors)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < budgets.size(); ++i)
      out << (i ? " " : "") << px(static_cast<double>(budgets[i])) << ',' << py(curves[c].values[i]);
    out << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(c);
    out << "<line x1=\"" << L + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << L + pw + 36 << "\" y=\"" << ly + 4 << "\">" << xml_escape(curves[c].label) << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::size_t> select_evaluation_set(const Classifier& clf, const LabeledImages& data, std::size_t size,
                                               std::uint64_t seed) {
  NPATTACK_REQUIRE(data.shape == clf.image, "evaluation data does not match the victim's input shape");
  std::vector<std::size_t> correct;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (predict(clf, data.images[i]) == data.labels[i]) correct.push_back(i);
  NPATTACK_REQUIRE(!correct.empty(), "no correctly classified images in the evaluation split");
  if (correct.size() <= size) return correct;
  // Selection sampling: each index kept with probability needed/remaining.
  std::mt19937_64 rng = derived_rng(seed, 0x5E1EC7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> out;
  std::size_t needed = size;
  for (std::size_t k = 0; k < correct.size() && needed > 0; ++k) {
    const std::size_t remaining = correct.size() - k;
    if (u(rng) * static_cast<double>(remaining) < static_cast<double>(needed)) {
      out.push_back(correct[k]);
      --needed;
    }
  }
  return out;
}

ExperimentOutcome run_experiment(const ExperimentSpec& spec, const Classifier& victim, const AnpParameters* np,
                                 const LabeledImages& data) {
  NPATTACK_REQUIRE(victim.image == data.shape, "victim checkpoint input shape does not match the dataset");
  if (spec.method == Method::NpAttack) {
    NPATTACK_REQUIRE(np != nullptr, "np_attack needs an NP checkpoint");
    NPATTACK_REQUIRE(np->arch.image == data.shape, "NP checkpoint image shape does not match the dataset");
  }
  const std::vector<std::size_t> chosen = select_evaluation_set(victim, data, spec.eval.size, spec.seed);

  struct Job {
    std::size_t image;
    int target;
  };
  std::vector<Job> jobs;
  for (std::size_t idx : chosen) {
    if (!spec.eval.targeted) {
      jobs.push_back({idx, -1});
      continue;
    }
    for (int t = 0; t < victim.classes(); ++t)
      if (t != data.labels[idx]) jobs.push_back({idx, t});
  }

  ExperimentOutcome outcome;
  outcome.results.resize(jobs.size());
  outcome.records.resize(jobs.size());
  std::vector<std::uint64_t> counted(jobs.size()), violations(jobs.size());
  const double eps = spec.epsilon();

#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(jobs.size()); ++j) {
    const Job& job = jobs[j];
    const Image& x = data.images[job.image];
    const int y = data.labels[job.image];
    QueryOracle oracle(victim);
    if (spec.eval.guard) oracle.set_guard(x, eps);
    const std::uint64_t seed = job_seed(spec.seed, job.image, job.target);
    AttackResult res;
    switch (spec.method) {
      case Method::NpAttack: {
        AttackConfig cfg = spec.attack;
        cfg.seed = seed;
        cfg.targeted = job.target >= 0;
        cfg.target_label = job.target;
        res = run_attack(oracle, *np, x, y, cfg);
        break;
      }
      case Method::PixelNes: {
        PixelNesConfig cfg = spec.pixel_nes;
        cfg.seed = seed;
        cfg.targeted = job.target >= 0;
        cfg.target_label = job.target;
        res = pixel_nes_attack(oracle, x, y, cfg);
        break;
      }
      case Method::CoordinateFd: {
        CoordinateFdConfig cfg = spec.coordinate_fd;
        cfg.seed = seed;
        cfg.targeted = job.target >= 0;
        cfg.target_label = job.target;
        res = coordinate_fd_attack(oracle, x, y, cfg);
        break;
      }
    }
    counted[j] = oracle.query_count();
    violations[j] = oracle.guard_violations();
    outcome.records[j] = ImageRecord{job.image,        y,          job.target,         res.success,
                                     res.queries_used, res.iterations_run, res.l2_distortion, res.linf_distortion};
    outcome.results[j] = std::move(res);
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    outcome.oracle_queries += counted[j];
    outcome.guard_violations += violations[j];
  }

  std::string label = method_name(spec.method);
  if (spec.method == Method::NpAttack) label += std::string("_") + variant_name(spec.attack.variant);
  outcome.metrics = aggregate(label, outcome.records, spec.seed);
  outcome.budgets = spec.eval.curve_budgets;
  outcome.curve = success_curve(outcome.results, outcome.budgets);
  return outcome;
}

ExperimentOutcome run_experiment(const ExperimentSpec& spec) {
  const LabeledImages data = load_split(spec.data, spec.eval.split);
  const Classifier victim = load_classifier(spec.victim.checkpoint);
  std::optional<AnpParameters> np;
  if (spec.method == Method::NpAttack) np = load_anp(spec.np.checkpoint);
  return run_experiment(spec, victim, np ? &*np : nullptr, data);
}

void write_outcome(const ExperimentSpec& spec, const ExperimentOutcome& o) {
  const auto base = spec.out_dir / spec.name;
  write_records_csv(base.string() + "_results.csv", o.records);
  write_metrics_csv(base.string() + "_metrics.csv", std::span<const MetricsRow>(&o.metrics, 1));
  const Curve curve{o.metrics.method, o.curve};
  write_curves_csv(base.string() + "_curve.csv", o.budgets, std::span<const Curve>(&curve, 1));
  if (spec.write_svg && !o.budgets.empty())
    write_curves_svg(base.string() + "_curve.svg", o.budgets, std::span<const Curve>(&curve, 1), spec.name);
}

std::vector<std::string> shared_field_diff(const ExperimentSpec& a, const ExperimentSpec& b) {
  std::vector<std::string> diff;
  auto check = [&](const std::string& field, const auto& x, const auto& y) {
    if (!(x == y)) diff.push_back(field);
  };
  check("data.source", a.data.source, b.data.source);
  check("data.train_images", a.data.train_images, b.data.train_images);
  check("data.train_labels", a.data.train_labels, b.data.train_labels);
  check("data.test_images", a.data.test_images, b.data.test_images);
  check("data.test_labels", a.data.test_labels, b.data.test_labels);
  check("data.downsample", a.data.downsample, b.data.downsample);
  check("data.limit_test", a.data.limit_test, b.data.limit_test);
  check("data.limit_train", a.data.limit_train, b.data.limit_train);
  if (a.data.source == "synthetic") {
    check("synth.classes", a.data.synth.classes, b.data.synth.classes);
    check("synth.height", a.data.synth.height, b.data.synth.height);
    check("synth.width", a.data.synth.width, b.data.synth.width);
    check("synth.train_samples", a.data.synth.samples, b.data.synth.samples);
    check("synth.test_samples", a.data.synth_test_samples, b.data.synth_test_samples);
    check("synth.seed", a.data.synth.seed, b.data.synth.seed);
    check("synth.noise", a.data.synth.noise, b.data.synth.noise);
  }
  check("victim.checkpoint", a.victim.checkpoint, b.victim.checkpoint);
  check("attack.epsilon", a.epsilon(), b.epsilon());
  check("eval.size", a.eval.size, b.eval.size);
  check("eval.split", a.eval.split, b.eval.split);
  check("eval.targeted", a.eval.targeted, b.eval.targeted);
  check("eval.curve_budgets", a.eval.curve_budgets, b.eval.curve_budgets);
  check("seed", a.seed, b.seed);
  return diff;
}

namespace {

void check_comparable(std::span<const ExperimentSpec> specs) {
  NPATTACK_REQUIRE(!specs.empty(), "compare: no specs");
  for (std::size_t i = 1; i < specs.size(); ++i) {
    const auto diff = shared_field_diff(specs[0], specs[i]);
    if (diff.empty()) continue;
    std::string msg = "compare: '" + specs[i].name + "' differs from '" + specs[0].name + "' in shared fields:";
    for (const auto& f : diff) msg += " " + f;
    throw ContractViolation(msg);
  }
}

}  // namespace

Comparison compare(std::span<const ExperimentSpec> specs, std::span<const ExperimentOutcome> outcomes) {
  check_comparable(specs);
  NPATTACK_REQUIRE(specs.size() == outcomes.size(), "compare: one outcome per spec");
  Comparison c;
  c.budgets = specs[0].eval.curve_budgets;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    MetricsRow row = outcomes[i].metrics;
    row.method = specs[i].name;
    c.rows.push_back(row);
    c.curves.push_back({specs[i].name, success_curve(outcomes[i].results, c.budgets)});
  }
  return c;
}

Comparison compare(std::span<const ExperimentSpec> specs) {
  check_comparable(specs);
  std::vector<ExperimentOutcome> outcomes;
  for (const ExperimentSpec& s : specs) outcomes.push_back(run_experiment(s));
  return compare(specs, outcomes);
}

void write_comparison(const std::filesystem::path& out_dir, const Comparison& c, bool svg) {
  write_metrics_csv(out_dir / "comparison.csv", c.rows);
  write_curves_csv(out_dir / "comparison_curves.csv", c.budgets, c.curves);
  if (svg && !c.budgets.empty()) write_curves_svg(out_dir / "comparison_curves.svg", c.budgets, c.curves, "success vs queries");
}

ReconstructionGap reconstruction_gap(const AnpParameters& np, const Classifier& victim, const LabeledImages& images,
                                     double epsilon, std::size_t pgd_steps, std::uint64_t seed) {
  NPATTACK_REQUIRE(epsilon >= 0.0, "reconstruction_gap: epsilon must be non-negative");
  NPATTACK_REQUIRE(images.size() >= 1, "reconstruction_gap: no images");
  NPATTACK_REQUIRE(np.arch.image == images.shape && victim.image == images.shape,
                   "reconstruction_gap: model and image shapes disagree");
  const std::size_t n = images.size();
  std::vector<double> adv(n), noised(n), benign(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const Image& x = images.images[i];
    const Image xa = fgsm_attack(victim, x, images.labels[i], epsilon, pgd_steps);
    Image xn = x;
    std::mt19937_64 rng = derived_rng(seed, static_cast<std::uint64_t>(i), 0x2015E);
    std::uniform_real_distribution<double> u(-epsilon, epsilon);
    for (double& v : xn) v = std::clamp(v + (epsilon > 0.0 ? u(rng) : 0.0), 0.0, 1.0);
    adv[i] = reconstruction_mse(np, xa);
    noised[i] = reconstruction_mse(np, xn);
    benign[i] = reconstruction_mse(np, x);
  }
  ReconstructionGap g;
  g.images = n;
  for (std::size_t i = 0; i < n; ++i) {
    g.adversarial_mse += adv[i];
    g.noised_mse += noised[i];
    g.benign_mse += benign[i];
  }
  g.adversarial_mse /= static_cast<double>(n);
  g.noised_mse /= static_cast<double>(n);
  g.benign_mse /= static_cast<double>(n);
  return g;
}

}  // namespace npattack
