#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "npattack/autodiff.hpp"
#include "npattack/image.hpp"
#include "npattack/tensor.hpp"

namespace npattack {

// Affine layer y = x·w + b, w is in×out, b is 1×out.
struct Linear {
  Tensor w;
  Tensor b;

  std::size_t in() const { return w.rows(); }
  std::size_t out() const { return w.cols(); }
};

struct AnpArch {
  ImageShape image{14, 14, 1};
  std::size_t hidden = 128;
  std::size_t d_r = 128;
  std::size_t d_z = 128;

  bool operator==(const AnpArch&) const = default;
};

inline constexpr double kSigmaFloor = 1e-4;
inline constexpr double kObservationSigma = 0.1;
inline constexpr std::uint32_t kAnpVersion = 1;

struct AnpParameters {
  AnpArch arch;
  std::uint32_t version = kAnpVersion;
  std::array<Linear, 3> det_mlp;   // 4 -> hidden -> hidden -> hidden
  std::array<Linear, 2> pos_mlp;   // 3 -> hidden -> hidden, cross-attention queries and keys
  Linear det_out;                  // hidden -> d_r
  std::array<Linear, 3> lat_mlp;   // 4 -> hidden -> hidden -> hidden
  Linear lat_head;                 // hidden -> 2·d_z (mu, pre-sigma)
  std::array<Linear, 4> dec;       // d_r + d_z + 3 -> hidden -> hidden -> hidden -> 1

  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  std::vector<std::string> tensor_names() const;
};

AnpParameters init_anp(const AnpArch& arch, std::uint64_t seed);

// Pixel positions (N×3, in [0,1]) and values (N, in [0,1]).
struct PixelContext {
  Tensor positions;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
};

PixelContext full_context(const Image& image, const ImageShape& shape);
// Rows of ctx at the given indices, in the order given.
PixelContext subset(const PixelContext& ctx, std::span<const std::size_t> indices);

struct LatentGaussian {
  std::vector<double> mu;
  std::vector<double> sigma;
};

struct DeterministicRep {
  Tensor r;  // N_target × d_r
};

struct Encoding {
  LatentGaussian latent;
  DeterministicRep det;
};

Encoding encode(const AnpParameters& params, const PixelContext& context, const Tensor& target_positions);
std::vector<double> decode(const AnpParameters& params, std::span<const double> z, const DeterministicRep& r,
                           const Tensor& target_positions);

// Decoder specialized to one fixed set of target positions. The position
// term of the first layer is folded into its bias once; optionally the r term
// too, when only z varies.
class FastDecoder {
 public:
  FastDecoder(const AnpParameters& params, const Tensor& target_positions);

  void fix_r(const Tensor& r);
  bool r_fixed() const { return r_term_.size() > 0; }

  // out receives N values in [0,1].
  void decode(std::span<const double> z, const Tensor& r, std::span<double> out) const;
  void decode_fixed_r(std::span<const double> z, std::span<double> out) const;
  std::size_t targets() const { return n_; }

 private:
  void add_z(Tensor& h1, std::span<const double> z) const;
  void finish(Tensor& h1, std::span<double> out) const;

  const AnpParameters* params_;
  std::size_t n_;
  Tensor pos_bias_;
  Tensor r_term_;
};

// ---- differentiable path ---------------------------------------------------

struct LinearVars {
  ad::Var w;
  ad::Var b;
};

struct AnpVars {
  std::array<LinearVars, 3> det_mlp;
  std::array<LinearVars, 2> pos_mlp;
  LinearVars det_out;
  std::array<LinearVars, 3> lat_mlp;
  LinearVars lat_head;
  std::array<LinearVars, 4> dec;

  // Same order as AnpParameters::tensors().
  std::vector<ad::Var*> slots();
};

AnpVars bind(ad::Tape& tape, AnpParameters& params);

struct LatentVars {
  ad::Var mu;
  ad::Var sigma;
};

LatentVars encode_latent(ad::Tape& tape, const AnpVars& v, const PixelContext& context);
ad::Var encode_deterministic(ad::Tape& tape, const AnpVars& v, const PixelContext& context,
                             const Tensor& target_positions);
ad::Var decode(ad::Tape& tape, const AnpVars& v, ad::Var z, ad::Var r, const Tensor& target_positions);

struct ElboTerms {
  ad::Var loss;  // negated ELBO
  ad::Var nll;
  ad::Var kl;
};

// eps is the standard-normal draw used to reparameterize z ~ q(z | target).
ElboTerms elbo_loss(ad::Tape& tape, const AnpVars& v, const PixelContext& context, const PixelContext& target,
                    std::span<const double> eps);
double elbo_loss(AnpParameters& params, const PixelContext& context, const PixelContext& target,
                 std::span<const double> eps);

struct TrainNpOptions {
  std::size_t epochs = 8;
  std::size_t batch = 1;
  double context_min = 0.5;
  double context_max = 1.0;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  // Called after each epoch with (epoch index, mean loss over the epoch).
  std::function<void(std::size_t, double)> on_epoch;
};

struct TrainNpHistory {
  std::vector<double> step_loss;
  std::vector<double> step_kl;
  std::vector<double> epoch_loss;
};

TrainNpHistory train_np(AnpParameters& params, const LabeledImages& dataset, const TrainNpOptions& options);

// Full-image context, z = mu.
Image reconstruct(const AnpParameters& params, const Image& image);
double reconstruction_mse(const AnpParameters& params, const Image& image);

void save_anp(const AnpParameters& params, const std::filesystem::path& path);
AnpParameters load_anp(const std::filesystem::path& path);

// Deterministic per-(seed, a, b) random stream.
std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace npattack
