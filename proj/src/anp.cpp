#include "npattack/anp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "npattack/checkpoint.hpp"
#include "npattack/error.hpp"
#include "npattack/kernels.hpp"
#include "npattack/optim.hpp"

namespace npattack {
namespace {

constexpr std::array<char, 4> kAnpMagic{'A', 'N', 'P', '1'};

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Linear l{Tensor(Shape{in, out}), Tensor(Shape{1, out})};
  for (double& v : l.w.values()) v = u(rng);
  for (double& v : l.b.values()) v = u(rng);
  return l;
}

double softplus_value(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor dense(const Tensor& x, const Linear& l, bool relu) {
  NPATTACK_REQUIRE(x.cols() == l.in(), "dense: input width does not match layer");
  const std::size_t n = x.rows(), m = l.out();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) std::copy(l.b.values().begin(), l.b.values().end(), out.values().begin() + i * m);
  kernels::matmul(x.view(), l.w.view(), out.view(), true);
  if (relu)
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor self_attention(const Tensor& h) {
  Tensor out(Shape{h.rows(), h.cols()});
  kernels::attention(h.view(), h.view(), h.view(), out.view(), {});
  return out;
}

Tensor pairs(const PixelContext& ctx) {
  const std::size_t n = ctx.size();
  Tensor x(Shape{n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 3; ++k) x.at(i, k) = ctx.positions.at(i, k);
    x.at(i, 3) = ctx.values[i];
  }
  return x;
}

void check_context(const PixelContext& ctx) {
  NPATTACK_REQUIRE(ctx.size() >= 1, "encode: empty context");
  NPATTACK_REQUIRE(ctx.positions.rows() == ctx.size() && ctx.positions.cols() == 3,
                   "encode: context positions must be N×3");
}

Tensor position_embedding(const AnpParameters& p, const Tensor& positions) {
  return dense(dense(positions, p.pos_mlp[0], true), p.pos_mlp[1], false);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return std::mt19937_64(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b));
}

std::vector<Tensor*> AnpParameters::tensors() {
  std::vector<Tensor*> out;
  auto add = [&](Linear& l) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  };
  for (auto& l : det_mlp) add(l);
  for (auto& l : pos_mlp) add(l);
  add(det_out);
  for (auto& l : lat_mlp) add(l);
  add(lat_head);
  for (auto& l : dec) add(l);
  return out;
}

std::vector<const Tensor*> AnpParameters::tensors() const {
  auto ts = const_cast<AnpParameters*>(this)->tensors();
  return {ts.begin(), ts.end()};
}

std::vector<std::string> AnpParameters::tensor_names() const {
  std::vector<std::string> out;
  auto add = [&](const std::string& name) {
    out.push_back(name + ".w");
    out.push_back(name + ".b");
  };
  for (int i = 0; i < 3; ++i) add("det_mlp" + std::to_string(i));
  for (int i = 0; i < 2; ++i) add("pos_mlp" + std::to_string(i));
  add("det_out");
  for (int i = 0; i < 3; ++i) add("lat_mlp" + std::to_string(i));
  add("lat_head");
  for (int i = 0; i < 4; ++i) add("dec" + std::to_string(i));
  return out;
}

AnpParameters init_anp(const AnpArch& arch, std::uint64_t seed) {
  NPATTACK_REQUIRE(arch.hidden >= 1 && arch.d_r >= 1 && arch.d_z >= 1, "init_anp: widths must be positive");
  NPATTACK_REQUIRE(arch.image.size() >= 1, "init_anp: empty image shape");
  std::mt19937_64 rng(splitmix64(seed));
  const std::size_t h = arch.hidden;
  AnpParameters p;
  p.arch = arch;
  p.det_mlp = {make_linear(4, h, rng), make_linear(h, h, rng), make_linear(h, h, rng)};
  p.pos_mlp = {make_linear(3, h, rng), make_linear(h, h, rng)};
  p.det_out = make_linear(h, arch.d_r, rng);
  p.lat_mlp = {make_linear(4, h, rng), make_linear(h, h, rng), make_linear(h, h, rng)};
  p.lat_head = make_linear(h, 2 * arch.d_z, rng);
  p.dec = {make_linear(arch.d_r + arch.d_z + 3, h, rng), make_linear(h, h, rng), make_linear(h, h, rng),
           make_linear(h, 1, rng)};
  return p;
}

PixelContext full_context(const Image& image, const ImageShape& shape) {
  NPATTACK_REQUIRE(image.size() == shape.size(), "full_context: image size does not match shape");
  PixelContext ctx{Tensor(Shape{shape.size(), 3}, pixel_positions(shape)), image};
  return ctx;
}

PixelContext subset(const PixelContext& ctx, std::span<const std::size_t> indices) {
  NPATTACK_REQUIRE(!indices.empty(), "subset: no indices");
  PixelContext out{Tensor(Shape{indices.size(), 3}), std::vector<double>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t j = indices[i];
    NPATTACK_REQUIRE(j < ctx.size(), "subset: index out of range");
    for (std::size_t k = 0; k < 3; ++k) out.positions.at(i, k) = ctx.positions.at(j, k);
    out.values[i] = ctx.values[j];
  }
  return out;
}

Encoding encode(const AnpParameters& p, const PixelContext& context, const Tensor& target_positions) {
  check_context(context);
  NPATTACK_REQUIRE(target_positions.cols() == 3 && target_positions.rows() >= 1, "encode: targets must be N×3");
  const Tensor x = pairs(context);

  Tensor h = x;
  for (const Linear& l : p.det_mlp) h = dense(h, l, true);
  h = self_attention(h);
  const Tensor keys = position_embedding(p, context.positions);
  const Tensor queries = position_embedding(p, target_positions);
  Tensor cross(Shape{queries.rows(), h.cols()});
  kernels::attention(queries.view(), keys.view(), h.cview(), cross.view(), {});
  Encoding enc;
  enc.det.r = dense(cross, p.det_out, false);

  Tensor g = x;
  for (const Linear& l : p.lat_mlp) g = dense(g, l, true);
  g = self_attention(g);
  Tensor pooled(Shape{1, g.cols()});
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) pooled[j] += g.at(i, j);
  for (double& v : pooled.values()) v /= static_cast<double>(g.rows());
  const Tensor head = dense(pooled, p.lat_head, false);
  const std::size_t dz = p.arch.d_z;
  enc.latent.mu.assign(head.values().begin(), head.values().begin() + dz);
  enc.latent.sigma.resize(dz);
  for (std::size_t j = 0; j < dz; ++j) enc.latent.sigma[j] = softplus_value(head[dz + j]) + kSigmaFloor;
  return enc;
}

std::vector<double> decode(const AnpParameters& p, std::span<const double> z, const DeterministicRep& r,
                           const Tensor& target_positions) {
  const std::size_t n = target_positions.rows();
  NPATTACK_REQUIRE(z.size() == p.arch.d_z, "decode: z has wrong length");
  NPATTACK_REQUIRE(r.r.rows() == n && r.r.cols() == p.arch.d_r, "decode: r rows must match target positions");
  NPATTACK_REQUIRE(target_positions.cols() == 3, "decode: targets must be N×3");
  const std::size_t width = p.arch.d_r + p.arch.d_z + 3;
  Tensor in(Shape{n, width});
  for (std::size_t i = 0; i < n; ++i) {
    double* row = in.values().data() + i * width;
    std::copy_n(r.r.values().begin() + i * p.arch.d_r, p.arch.d_r, row);
    std::copy(z.begin(), z.end(), row + p.arch.d_r);
    for (std::size_t k = 0; k < 3; ++k) row[p.arch.d_r + p.arch.d_z + k] = target_positions.at(i, k);
  }
  Tensor h = in;
  for (std::size_t k = 0; k < 3; ++k) h = dense(h, p.dec[k], true);
  const Tensor o = dense(h, p.dec[3], false);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_value(o[i]);
  return out;
}

// ---- fast decoder -----------------------------------------------------------

FastDecoder::FastDecoder(const AnpParameters& params, const Tensor& target_positions)
    : params_(&params), n_(target_positions.rows()) {
  NPATTACK_REQUIRE(target_positions.cols() == 3 && n_ >= 1, "FastDecoder: targets must be N×3");
  const Linear& l1 = params.dec[0];
  const std::size_t h = l1.out();
  const std::size_t off = params.arch.d_r + params.arch.d_z;
  pos_bias_ = Tensor(Shape{n_, h});
  kernels::ConstMatrix w_pos{l1.w.values().subspan(off * h, 3 * h), 3, h};
  for (std::size_t i = 0; i < n_; ++i) std::copy(l1.b.values().begin(), l1.b.values().end(), pos_bias_.values().begin() + i * h);
  kernels::matmul(target_positions.view(), w_pos, pos_bias_.view(), true);
}

void FastDecoder::fix_r(const Tensor& r) {
  const std::size_t dr = params_->arch.d_r;
  NPATTACK_REQUIRE(r.rows() == n_ && r.cols() == dr, "FastDecoder: r has wrong shape");
  const Linear& l1 = params_->dec[0];
  const std::size_t h = l1.out();
  r_term_ = pos_bias_;
  kernels::ConstMatrix w_r{l1.w.values().subspan(0, dr * h), dr, h};
  kernels::matmul(r.view(), w_r, r_term_.view(), true);
}

void FastDecoder::decode(std::span<const double> z, const Tensor& r, std::span<double> out) const {
  const std::size_t dr = params_->arch.d_r;
  NPATTACK_REQUIRE(r.rows() == n_ && r.cols() == dr, "FastDecoder: r has wrong shape");
  const Linear& l1 = params_->dec[0];
  Tensor h1 = pos_bias_;
  kernels::ConstMatrix w_r{l1.w.values().subspan(0, dr * l1.out()), dr, l1.out()};
  kernels::matmul(r.view(), w_r, h1.view(), true);
  add_z(h1, z);
  finish(h1, out);
}

void FastDecoder::decode_fixed_r(std::span<const double> z, std::span<double> out) const {
  NPATTACK_REQUIRE(r_fixed(), "FastDecoder: fix_r() has not been called");
  Tensor h1 = r_term_;
  add_z(h1, z);
  finish(h1, out);
}


void FastDecoder::add_z(Tensor& h1, std::span<const double> z) const {
  const std::size_t dr = params_->arch.d_r, dz = params_->arch.d_z;
  NPATTACK_REQUIRE(z.size() == dz, "FastDecoder: z has wrong length");
  const Linear& l1 = params_->dec[0];
  const std::size_t h = l1.out();
  std::vector<double> zrow(h, 0.0);
  kernels::matmul({z, 1, dz}, {l1.w.values().subspan(dr * h, dz * h), dz, h}, {zrow, 1, h});
  for (std::size_t i = 0; i < n_; ++i) {
    double* row = h1.values().data() + i * h;
    for (std::size_t j = 0; j < h; ++j) row[j] += zrow[j];
  }
}

void FastDecoder::finish(Tensor& h1, std::span<double> out) const {
  NPATTACK_REQUIRE(out.size() == n_, "FastDecoder: output span has wrong length");
  for (double& v : h1.values()) v = v > 0.0 ? v : 0.0;
  const Tensor h2 = dense(h1, params_->dec[1], true);
  const Tensor h3 = dense(h2, params_->dec[2], true);
  const Tensor o = dense(h3, params_->dec[3], false);
  for (std::size_t i = 0; i < n_; ++i) out[i] = sigmoid_value(o[i]);
}

// ---- differentiable path ---------------------------------------------------

std::vector<ad::Var*> AnpVars::slots() {
  std::vector<ad::Var*> out;
  auto add = [&](LinearVars& l) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  };
  for (auto& l : det_mlp) add(l);
  for (auto& l : pos_mlp) add(l);
  add(det_out);
  for (auto& l : lat_mlp) add(l);
  add(lat_head);
  for (auto& l : dec) add(l);
  return out;
}

AnpVars bind(ad::Tape& tape, AnpParameters& params) {
  AnpVars v;
  auto ts = params.tensors();
  auto slots = v.slots();
  for (std::size_t i = 0; i < ts.size(); ++i) *slots[i] = tape.leaf(*ts[i]);
  return v;
}

namespace {

ad::Var affine(const LinearVars& l, ad::Var x) { return ad::affine(x, l.w, l.b); }

ad::Var mlp3(const std::array<LinearVars, 3>& layers, ad::Var x) {
  for (const LinearVars& l : layers) x = ad::relu(affine(l, x));
  return x;
}

ad::Var pos_embed(ad::Tape& tape, const AnpVars& v, const Tensor& positions) {
  return affine(v.pos_mlp[1], ad::relu(affine(v.pos_mlp[0], tape.constant(positions))));
}

}  // namespace

LatentVars encode_latent(ad::Tape& tape, const AnpVars& v, const PixelContext& context) {
  check_context(context);
  ad::Var h = mlp3(v.lat_mlp, tape.constant(pairs(context)));
  h = ad::scaled_dot_attention(h, h, h);
  const ad::Var head = affine(v.lat_head, ad::mean_rows(h));
  const std::size_t dz = head.cols() / 2;
  const ad::Var floor = tape.constant(Tensor(Shape{1, dz}, kSigmaFloor));
  return {ad::slice_cols(head, 0, dz), ad::add(ad::softplus(ad::slice_cols(head, dz, dz)), floor)};
}

ad::Var encode_deterministic(ad::Tape& tape, const AnpVars& v, const PixelContext& context,
                             const Tensor& target_positions) {
  check_context(context);
  ad::Var h = mlp3(v.det_mlp, tape.constant(pairs(context)));
  h = ad::scaled_dot_attention(h, h, h);
  const ad::Var keys = pos_embed(tape, v, context.positions);
  const ad::Var queries = pos_embed(tape, v, target_positions);
  return affine(v.det_out, ad::scaled_dot_attention(queries, keys, h));
}

ad::Var decode(ad::Tape& tape, const AnpVars& v, ad::Var z, ad::Var r, const Tensor& target_positions) {
  const std::size_t n = target_positions.rows();
  NPATTACK_REQUIRE(r.rows() == n, "decode: r rows must match target positions");
  const std::array<ad::Var, 3> parts{r, ad::broadcast_rows(z, n), tape.constant(target_positions)};
  ad::Var h = ad::concat_cols(parts);
  for (std::size_t k = 0; k < 3; ++k) h = ad::relu(affine(v.dec[k], h));
  return ad::sigmoid(affine(v.dec[3], h));
}

ElboTerms elbo_loss(ad::Tape& tape, const AnpVars& v, const PixelContext& context, const PixelContext& target,
                    std::span<const double> eps) {
  const LatentVars q_t = encode_latent(tape, v, target);
  const LatentVars q_c = encode_latent(tape, v, context);
  NPATTACK_REQUIRE(eps.size() == q_t.mu.cols(), "elbo_loss: eps has wrong length");
  const ad::Var noise = tape.constant(Tensor(Shape{1, eps.size()}, std::vector<double>(eps.begin(), eps.end())));
  const ad::Var z = ad::add(q_t.mu, ad::mul(q_t.sigma, noise));
  const ad::Var r = encode_deterministic(tape, v, context, target.positions);
  const ad::Var pred = decode(tape, v, z, r, target.positions);
  const Tensor observed(Shape{target.size(), 1}, target.values);
  const ad::Var nll = ad::scale(ad::gaussian_log_density(pred, observed, kObservationSigma), -1.0);
  const ad::Var kl = ad::diag_gaussian_kl(q_t.mu, q_t.sigma, q_c.mu, q_c.sigma);
  return {ad::add(nll, kl), nll, kl};
}

double elbo_loss(AnpParameters& params, const PixelContext& context, const PixelContext& target,
                 std::span<const double> eps) {
  ad::Tape tape(ad::GradientSink::TapeOnly);
  const AnpVars v = bind(tape, params);
  return elbo_loss(tape, v, context, target, eps).loss.value().item();
}

// ---- training ---------------------------------------------------------------

namespace {

struct ItemResult {
  double loss = 0.0;
  double kl = 0.0;
  std::vector<std::vector<double>> grads;
};

ItemResult train_item(AnpParameters& params, const Image& image, const TrainNpOptions& o, std::uint64_t step,
                      std::uint64_t item) {
  std::mt19937_64 rng = derived_rng(o.seed, step, item);
  const PixelContext target = full_context(image, params.arch.image);
  const std::size_t n = target.size();
  std::uniform_real_distribution<double> frac(o.context_min, o.context_max);
  const double f = o.context_min == o.context_max ? o.context_min : frac(rng);
  const std::size_t nc = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(f * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (nc < n) {
    for (std::size_t i = 0; i < nc; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(nc);
    std::sort(idx.begin(), idx.end());
  }
  const PixelContext context = subset(target, idx);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> eps(params.arch.d_z);
  for (double& e : eps) e = normal(rng);

  ad::Tape tape(ad::GradientSink::TapeOnly);
  const AnpVars v = bind(tape, params);
  const ElboTerms terms = elbo_loss(tape, v, context, target, eps);
  tape.backward(terms.loss);
  ItemResult res;
  res.loss = terms.loss.value().item();
  res.kl = terms.kl.value().item();
  for (const Tensor* t : params.tensors()) {
    auto g = tape.leaf_gradient(*t);
    res.grads.emplace_back(g.begin(), g.end());
  }
  return res;
}

}  // namespace

TrainNpHistory train_np(AnpParameters& params, const LabeledImages& dataset, const TrainNpOptions& o) {
  NPATTACK_REQUIRE(dataset.size() >= 1, "train_np: empty dataset");
  NPATTACK_REQUIRE(dataset.shape == params.arch.image, "train_np: dataset image shape does not match the model");
  NPATTACK_REQUIRE(o.batch >= 1 && o.epochs >= 1, "train_np: batch and epochs must be positive");
  NPATTACK_REQUIRE(0.0 < o.context_min && o.context_min <= o.context_max && o.context_max <= 1.0,
                   "train_np: context fraction range must lie in (0, 1]");
  Adam adam(params.tensors(), AdamOptions{o.lr});
  TrainNpHistory hist;
  std::uint64_t step = 0;
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng = derived_rng(o.seed, 0xE90C, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += o.batch, ++step) {
      const std::size_t count = std::min(o.batch, order.size() - start);
      std::vector<ItemResult> items(count);
#pragma omp parallel for schedule(dynamic) if (count > 1)
      for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(count); ++k)
        items[k] = train_item(params, dataset.images[order[start + k]], o, step, k);
      auto ts = params.tensors();
      const double inv = 1.0 / static_cast<double>(count);
      double loss = 0.0, kl = 0.0;
      for (std::size_t t = 0; t < ts.size(); ++t) {
        ts[t]->zero_grad();
        auto g = ts[t]->grad();
        for (const ItemResult& it : items)
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += it.grads[t][j];
        for (double& x : g) x *= inv;
      }
      for (const ItemResult& it : items) {
        loss += it.loss;
        kl += it.kl;
      }
      adam.step();
      hist.step_loss.push_back(loss * inv);
      hist.step_kl.push_back(kl * inv);
      epoch_sum += loss * inv;
      ++epoch_steps;
    }
    hist.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
    if (o.on_epoch) o.on_epoch(epoch, hist.epoch_loss.back());
  }
  for (Tensor* t : params.tensors()) t->drop_grad();
  return hist;
}

Image reconstruct(const AnpParameters& params, const Image& image) {
  NPATTACK_REQUIRE(image.size() == params.arch.image.size(), "reconstruct: image does not match the model's size");
  const PixelContext ctx = full_context(image, params.arch.image);
  const Encoding enc = encode(params, ctx, ctx.positions);
  return decode(params, enc.latent.mu, enc.det, ctx.positions);
}

double reconstruction_mse(const AnpParameters& params, const Image& image) {
  const Image rec = reconstruct(params, image);
  double s = 0.0;
  for (std::size_t i = 0; i < rec.size(); ++i) s += (rec[i] - image[i]) * (rec[i] - image[i]);
  return s / static_cast<double>(rec.size());
}

// ---- checkpoint -------------------------------------------------------------

void save_anp(const AnpParameters& params, const std::filesystem::path& path) {
  Container c;
  c.magic = kAnpMagic;
  const AnpArch& a = params.arch;
  c.header = {params.version, a.d_z, a.d_r, a.hidden, a.image.height, a.image.width, a.image.channels};
  for (const Tensor* t : params.tensors()) {
    Tensor copy = *t;
    copy.drop_grad();
    c.tensors.push_back(std::move(copy));
  }
  write_container(c, path);
}

AnpParameters load_anp(const std::filesystem::path& path) {
  Container c = read_container(path, kAnpMagic);
  if (c.header.size() != 7) throw ParseError("ANP1: architecture descriptor has wrong length", 4);
  if (c.header[0] != kAnpVersion) throw ParseError("ANP1: unsupported version " + std::to_string(c.header[0]), 8);
  AnpArch a;
  a.d_z = c.header[1];
  a.d_r = c.header[2];
  a.hidden = c.header[3];
  a.image = {c.header[4], c.header[5], c.header[6]};
  if (a.d_z == 0 || a.d_r == 0 || a.hidden == 0 || a.image.size() == 0)
    throw ParseError("ANP1: architecture descriptor has a zero extent", 16);
  AnpParameters p = init_anp(a, 0);
  check_shape_table(c.tensors, std::as_const(p).tensors());
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) *ts[i] = std::move(c.tensors[i]);
  return p;
}

}  // namespace npattack
