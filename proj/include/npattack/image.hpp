#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace npattack {

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;

  std::size_t size() const { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

// Pixel values in [0,1], row-major (row, column, channel).
using Image = std::vector<double>;

struct LabeledImages {
  ImageShape shape;
  std::vector<Image> images;
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const { return images.size(); }
};

// IDX containers (big-endian). Offsets in ParseError point into the given
// byte buffer.
LabeledImages parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes);
LabeledImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const LabeledImages& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// Mean of each factor×factor block.
LabeledImages downsample(const LabeledImages& data, std::size_t factor);

struct SynthSpec {
  int classes = 4;
  std::size_t height = 10;
  std::size_t width = 10;
  std::size_t samples = 400;
  std::uint64_t seed = 1;
  double noise = 0.05;
};

// Class-distinct blob and stripe patterns with per-sample jitter and noise.
LabeledImages synth_dataset(const SynthSpec& spec);

// Normalized (row, column, channel) coordinates of every pixel, N×3 row-major.
std::vector<double> pixel_positions(const ImageShape& shape);

// [x - eps, x + eps] ∩ [0,1], tightened by an ulp where rounding would put an
// endpoint more than eps away from x.
struct PixelBox {
  double lo;
  double hi;
};
PixelBox linf_box(double x, double epsilon);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace npattack
