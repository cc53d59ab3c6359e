#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "npattack/anp.hpp"
#include "npattack/checkpoint.hpp"
#include "npattack/error.hpp"
#include "npattack/optim.hpp"

using namespace npattack;

namespace {

Image random_image(const ImageShape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return testutil::random_vector(s.size(), rng);
}

std::vector<double> dense_row(std::span<const double> x, const Linear& l, bool relu) {
  std::vector<double> y(l.out());
  for (std::size_t j = 0; j < l.out(); ++j) {
    double s = l.b[j];
    for (std::size_t i = 0; i < l.in(); ++i) s += x[i] * l.w.at(i, j);
    y[j] = relu ? std::max(0.0, s) : s;
  }
  return y;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("npattack_test_" + name);
}

}  // namespace

TEST_CASE("parameter shapes follow the architecture") {
  AnpArch a;
  const AnpParameters p = init_anp(a, 1);
  CHECK(p.det_mlp[0].w.shape() == Shape{4, 128});
  CHECK(p.det_mlp[2].w.shape() == Shape{128, 128});
  CHECK(p.det_out.w.shape() == Shape{128, 128});
  CHECK(p.lat_mlp[0].w.shape() == Shape{4, 128});
  CHECK(p.lat_head.w.shape() == Shape{128, 256});
  CHECK(p.dec[0].w.shape() == Shape{259, 128});
  CHECK(p.dec[3].w.shape() == Shape{128, 1});
  CHECK(p.tensors().size() == p.tensor_names().size());
}

TEST_CASE("full context enumerates pixels in row-major order") {
  const ImageShape s{2, 3, 1};
  const Image img{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  const PixelContext c = full_context(img, s);
  REQUIRE(c.size() == 6);
  CHECK(c.positions.at(4, 0) == 1.0);
  CHECK(c.positions.at(4, 1) == 0.5);
  CHECK(c.positions.at(4, 2) == 0.0);
  CHECK(c.values[4] == 0.4);
}

TEST_CASE("encoder is invariant to context permutation") {
  const AnpArch a = testutil::tiny_arch();
  const AnpParameters p = init_anp(a, 3);
  const PixelContext ctx = full_context(random_image(a.image, 4), a.image);
  std::vector<std::size_t> perm(ctx.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(5);
  std::shuffle(perm.begin(), perm.end(), rng);
  const PixelContext shuffled = subset(ctx, perm);
  const Encoding e1 = encode(p, ctx, ctx.positions);
  const Encoding e2 = encode(p, shuffled, ctx.positions);
  CHECK(testutil::max_abs_diff(e1.latent.mu, e2.latent.mu) < 1e-12);
  CHECK(testutil::max_abs_diff(e1.latent.sigma, e2.latent.sigma) < 1e-12);
  CHECK(testutil::max_abs_diff(e1.det.r.values(), e2.det.r.values()) < 1e-12);
}

TEST_CASE("duplicating every context pair leaves the latent statistics unchanged") {
  const AnpArch a = testutil::tiny_arch();
  const AnpParameters p = init_anp(a, 6);
  const PixelContext ctx = full_context(random_image(a.image, 7), a.image);
  std::vector<std::size_t> dup;
  for (std::size_t i = 0; i < ctx.size(); ++i) dup.insert(dup.end(), {i, i});
  const Encoding e1 = encode(p, ctx, ctx.positions);
  const Encoding e2 = encode(p, subset(ctx, dup), ctx.positions);
  CHECK(testutil::max_abs_diff(e1.latent.mu, e2.latent.mu) < 1e-12);
  CHECK(testutil::max_abs_diff(e1.latent.sigma, e2.latent.sigma) < 1e-12);
}

TEST_CASE("single-pixel context traces through the composed affine maps") {
  const AnpArch a = testutil::tiny_arch();
  const AnpParameters p = init_anp(a, 8);
  const PixelContext full = full_context(random_image(a.image, 9), a.image);
  const std::vector<std::size_t> one{4};
  const PixelContext ctx = subset(full, one);
  const Encoding e = encode(p, ctx, ctx.positions);
  std::vector<double> h{ctx.positions[0], ctx.positions[1], ctx.positions[2], ctx.values[0]};
  for (const Linear& l : p.det_mlp) h = dense_row(h, l, true);
  const auto r = dense_row(h, p.det_out, false);
  CHECK(testutil::max_abs_diff(e.det.r.values(), r) < 1e-12);
}

TEST_CASE("sigma respects the floor and the decoder stays in [0,1]") {
  const AnpArch a = testutil::tiny_arch();
  AnpParameters p = init_anp(a, 10);
  for (double& v : p.lat_head.b.values()) v = -50.0;
  const PixelContext ctx = full_context(random_image(a.image, 11), a.image);
  const Encoding e = encode(p, ctx, ctx.positions);
  for (double s : e.latent.sigma) CHECK(s >= kSigmaFloor);
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto z = testutil::random_vector(a.d_z, rng, -100, 100);
    DeterministicRep r{testutil::random_tensor({ctx.size(), a.d_r}, rng, -100, 100)};
    for (double v : decode(p, z, r, ctx.positions)) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("identical r rows and positions decode identically") {
  const AnpArch a = testutil::tiny_arch();
  const AnpParameters p = init_anp(a, 13);
  std::mt19937_64 rng(14);
  Tensor pos({2, 3}, std::vector<double>{0.5, 0.25, 0.0, 0.5, 0.25, 0.0});
  const auto rowv = testutil::random_vector(a.d_r, rng, -1, 1);
  Tensor r({2, a.d_r});
  for (std::size_t j = 0; j < a.d_r; ++j) r.at(0, j) = r.at(1, j) = rowv[j];
  const auto z = testutil::random_vector(a.d_z, rng, -1, 1);
  const auto out = decode(p, z, DeterministicRep{r}, pos);
  CHECK(out[0] == out[1]);
}

TEST_CASE("tape forward, plain forward and the fast decoder agree") {
  const AnpArch a = testutil::tiny_arch(4, 3);
  AnpParameters p = init_anp(a, 15);
  const PixelContext ctx = full_context(random_image(a.image, 16), a.image);
  const Encoding e = encode(p, ctx, ctx.positions);

  ad::Tape tape;
  const AnpVars v = bind(tape, p);
  const LatentVars lat = encode_latent(tape, v, ctx);
  const ad::Var r = encode_deterministic(tape, v, ctx, ctx.positions);
  CHECK(testutil::max_abs_diff(lat.mu.value().values(), e.latent.mu) < 1e-12);
  CHECK(testutil::max_abs_diff(lat.sigma.value().values(), e.latent.sigma) < 1e-12);
  CHECK(testutil::max_abs_diff(r.value().values(), e.det.r.values()) < 1e-12);

  std::mt19937_64 rng(17);
  const auto z = testutil::random_vector(a.d_z, rng, -1, 1);
  const ad::Var out = decode(tape, v, tape.constant(Tensor::row(z)), r, ctx.positions);
  const auto plain = decode(p, z, e.det, ctx.positions);
  CHECK(testutil::max_abs_diff(out.value().values(), plain) < 1e-12);

  FastDecoder fast(p, ctx.positions);
  std::vector<double> f1(ctx.size()), f2(ctx.size());
  fast.decode(z, e.det.r, f1);
  CHECK(testutil::max_abs_diff(f1, plain) < 1e-12);
  fast.fix_r(e.det.r);
  fast.decode_fixed_r(z, f2);
  CHECK(testutil::max_abs_diff(f2, plain) < 1e-12);
}

TEST_CASE("encode and decode contracts") {
  const AnpArch a = testutil::tiny_arch();
  const AnpParameters p = init_anp(a, 18);
  PixelContext empty;
  const Tensor pos(Shape{1, 3});
  CHECK_THROWS_AS(encode(p, empty, pos), ContractViolation);
  const std::vector<double> z(a.d_z + 1, 0.0);
  CHECK_THROWS_AS(decode(p, z, DeterministicRep{Tensor({1, a.d_r})}, pos), ContractViolation);
  const std::vector<double> zok(a.d_z, 0.0);
  CHECK_THROWS_AS(decode(p, zok, DeterministicRep{Tensor({2, a.d_r})}, pos), ContractViolation);
  CHECK_THROWS_AS(reconstruct(p, Image(a.image.size() + 1, 0.5)), ContractViolation);
}

TEST_CASE("context equal to target gives a zero KL term") {
  const AnpArch a = testutil::tiny_arch();
  AnpParameters p = init_anp(a, 19);
  const PixelContext ctx = full_context(random_image(a.image, 20), a.image);
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> eps(a.d_z);
  for (double& v : eps) v = n(rng);
  ad::Tape tape;
  const AnpVars v = bind(tape, p);
  const ElboTerms t = elbo_loss(tape, v, ctx, ctx, eps);
  CHECK(t.kl.value()[0] == 0.0);
  CHECK(std::isfinite(t.loss.value()[0]));
}

TEST_CASE("ELBO gradient on a 4-pixel image matches central differences for every parameter") {
  AnpArch a = testutil::tiny_arch(2, 2);
  const AnpParameters base = init_anp(a, 22);
  const PixelContext target = full_context(Image{0.1, 0.7, 0.4, 0.9}, a.image);
  const std::vector<std::size_t> ci{0, 3};
  const PixelContext context = subset(target, ci);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> eps(a.d_z);
  for (double& v : eps) v = n(rng);

  const std::size_t count = AnpParameters(base).tensors().size();
  double worst = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    AnpParameters p = base;
    const Tensor point = *p.tensors()[k];
    const TapeFunction f = [&, k](ad::Tape& tape, ad::Var x) {
      AnpVars v = bind(tape, p);
      *v.slots()[k] = x;
      return elbo_loss(tape, v, context, target, eps).loss;
    };
    const auto report = gradient_check(f, point, 1e-6);
    CAPTURE(k);
    CHECK(report.max_relative_error < 1e-3);
    worst = std::max(worst, report.max_relative_error);
  }
  MESSAGE("worst ELBO gradient relative error " << worst);
}

TEST_CASE("training with full context never adds KL and is reproducible") {
  SynthSpec s;
  s.height = 4;
  s.width = 4;
  s.samples = 6;
  const LabeledImages data = synth_dataset(s);
  AnpArch a = testutil::tiny_arch(4, 4);
  TrainNpOptions o;
  o.epochs = 2;
  o.batch = 2;
  o.context_min = o.context_max = 1.0;
  AnpParameters p1 = init_anp(a, 24);
  AnpParameters p2 = init_anp(a, 24);
  const auto h1 = train_np(p1, data, o);
  const auto h2 = train_np(p2, data, o);
  for (double kl : h1.step_kl) CHECK(kl == 0.0);
  CHECK(h1.step_loss == h2.step_loss);
  CHECK(h1.epoch_loss.size() == 2);
  CHECK(p1.dec[0].w.storage() == p2.dec[0].w.storage());
  LabeledImages empty;
  empty.shape = a.image;
  CHECK_THROWS_AS(train_np(p1, empty, o), ContractViolation);
}

TEST_CASE("short training lowers the loss on the synthetic set") {
  SynthSpec s;
  s.height = 6;
  s.width = 6;
  s.samples = 40;
  const LabeledImages data = synth_dataset(s);
  AnpArch a;
  a.image = data.shape;
  a.hidden = a.d_r = a.d_z = 16;
  AnpParameters p = init_anp(a, 25);
  TrainNpOptions o;
  o.epochs = 6;
  o.lr = 3e-3;
  const auto h = train_np(p, data, o);
  CHECK(h.epoch_loss.back() < h.epoch_loss.front());
  for (const Image& img : data.images)
    for (double v : reconstruct(p, img)) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
}

TEST_CASE("checkpoint round trip and rejection") {
  const AnpArch a = testutil::tiny_arch();
  const AnpParameters p = init_anp(a, 26);
  const auto path = temp_path("anp.bin");
  save_anp(p, path);
  const AnpParameters q = load_anp(path);
  CHECK(q.arch == p.arch);
  const auto pt = p.tensors(), qt = q.tensors();
  REQUIRE(pt.size() == qt.size());
  for (std::size_t i = 0; i < pt.size(); ++i) CHECK(pt[i]->storage() == qt[i]->storage());

  auto bytes = read_file(path);
  auto bad = bytes;
  bad[0] = 'X';
  {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(load_anp(path), ParseError);

  Container c = decode_container(bytes, {'A', 'N', 'P', '1'});
  c.tensors[3] = Tensor({2, 2});
  write_container(c, path);
  CHECK_THROWS_AS(load_anp(path), ParseError);

  bytes.resize(bytes.size() - 5);
  CHECK_THROWS_AS(decode_container(bytes, {'A', 'N', 'P', '1'}), ParseError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_anp(path), IoError);
}

TEST_CASE("derived streams depend on every key") {
  auto a = derived_rng(1, 2, 3)();
  CHECK(a == derived_rng(1, 2, 3)());
  CHECK(a != derived_rng(1, 2, 4)());
  CHECK(a != derived_rng(1, 3, 3)());
  CHECK(a != derived_rng(2, 2, 3)());
}
