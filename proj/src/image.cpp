#include "npattack/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>

#include "npattack/error.hpp"

namespace npattack {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const char* what) : bytes_(bytes), what_(what) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw ParseError(std::string(what_) + ": truncated, need " + std::to_string(n) + " more bytes, have " +
                           std::to_string(bytes_.size() - pos_),
                       pos_);
  }

  std::span<const std::uint8_t> bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

void put_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

PixelBox linf_box(double x, double epsilon) {
  double lo = std::max(0.0, x - epsilon);
  double hi = std::min(1.0, x + epsilon);
  while (x - lo > epsilon) lo = std::nextafter(lo, 1.0);
  while (hi - x > epsilon) hi = std::nextafter(hi, 0.0);
  return {lo, hi};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

LabeledImages parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  ByteReader img(image_bytes, "idx images");
  const std::size_t magic_at = img.pos();
  const std::uint32_t magic = img.u32();
  if (magic != kImageMagic) throw ParseError("idx images: bad magic", magic_at);
  const std::uint32_t count = img.u32();
  const std::uint32_t rows = img.u32();
  const std::uint32_t cols = img.u32();
  if (rows == 0 || cols == 0) throw ParseError("idx images: zero image extent", 8);

  ByteReader lab(label_bytes, "idx labels");
  const std::uint32_t lmagic = lab.u32();
  if (lmagic != kLabelMagic) throw ParseError("idx labels: bad magic", 0);
  const std::size_t lcount_at = lab.pos();
  const std::uint32_t lcount = lab.u32();
  if (lcount != count)
    throw ParseError("idx labels: count mismatch, " + std::to_string(lcount) + " labels for " +
                         std::to_string(count) + " images",
                     lcount_at);

  LabeledImages out;
  out.shape = {rows, cols, 1};
  const std::size_t n = out.shape.size();
  out.images.reserve(count);
  out.labels.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto raw = img.take(n);
    Image im(n);
    for (std::size_t j = 0; j < n; ++j) im[j] = raw[j] / 255.0;
    out.images.push_back(std::move(im));
  }
  int max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const int y = lab.take(1)[0];
    max_label = std::max(max_label, y);
    out.labels.push_back(y);
  }
  out.classes = max_label + 1;
  return out;
}

LabeledImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  return parse_idx(ib, lb);
}

void write_idx(const LabeledImages& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  NPATTACK_REQUIRE(data.shape.channels == 1, "write_idx: single-channel images only");
  std::ofstream im(images, std::ios::binary);
  std::ofstream lb(labels, std::ios::binary);
  if (!im || !lb) throw IoError("cannot write idx files");
  put_u32(im, kImageMagic);
  put_u32(im, static_cast<std::uint32_t>(data.size()));
  put_u32(im, static_cast<std::uint32_t>(data.shape.height));
  put_u32(im, static_cast<std::uint32_t>(data.shape.width));
  for (const Image& x : data.images)
    for (double v : x) im.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  put_u32(lb, kLabelMagic);
  put_u32(lb, static_cast<std::uint32_t>(data.size()));
  for (int y : data.labels) lb.put(static_cast<char>(y));
  if (!im || !lb) throw IoError("write failed for idx files");
}

LabeledImages downsample(const LabeledImages& data, std::size_t factor) {
  NPATTACK_REQUIRE(factor >= 1, "downsample: factor must be positive");
  if (factor == 1) return data;
  const ImageShape& s = data.shape;
  NPATTACK_REQUIRE(s.height % factor == 0 && s.width % factor == 0, "downsample: size not divisible by factor");
  LabeledImages out;
  out.shape = {s.height / factor, s.width / factor, s.channels};
  out.labels = data.labels;
  out.classes = data.classes;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (const Image& x : data.images) {
    Image y(out.shape.size(), 0.0);
    for (std::size_t r = 0; r < s.height; ++r)
      for (std::size_t c = 0; c < s.width; ++c)
        for (std::size_t ch = 0; ch < s.channels; ++ch)
          y[((r / factor) * out.shape.width + c / factor) * s.channels + ch] += x[(r * s.width + c) * s.channels + ch];
    for (double& v : y) v *= inv;
    out.images.push_back(std::move(y));
  }
  return out;
}

LabeledImages synth_dataset(const SynthSpec& spec) {
  NPATTACK_REQUIRE(spec.classes >= 2, "synth_dataset: need at least two classes");
  NPATTACK_REQUIRE(spec.height >= 2 && spec.width >= 2, "synth_dataset: image too small");
  LabeledImages out;
  out.shape = {spec.height, spec.width, 1};
  out.classes = spec.classes;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> jitter(-0.04, 0.04);
  std::uniform_real_distribution<double> phase(0.0, 0.5);
  std::normal_distribution<double> noise(0.0, spec.noise);
  const double k = static_cast<double>(spec.classes);
  for (std::size_t s = 0; s < spec.samples; ++s) {
    const int label = static_cast<int>(s % static_cast<std::size_t>(spec.classes));
    const double theta = 2.0 * std::numbers::pi * label / k;
    const double cy = 0.5 + 0.28 * std::sin(theta) + jitter(rng);
    const double cx = 0.5 + 0.28 * std::cos(theta) + jitter(rng);
    const double phi = std::numbers::pi * label / k;
    const double ph = phase(rng);
    Image img(out.shape.size());
    for (std::size_t r = 0; r < spec.height; ++r) {
      for (std::size_t c = 0; c < spec.width; ++c) {
        const double u = static_cast<double>(r) / static_cast<double>(spec.height - 1);
        const double v = static_cast<double>(c) / static_cast<double>(spec.width - 1);
        const double d2 = (u - cy) * (u - cy) + (v - cx) * (v - cx);
        const double blob = std::exp(-d2 / (2.0 * 0.15 * 0.15));
        const double stripe = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * (1.5 * (u * std::cos(phi) + v * std::sin(phi)) + ph));
        img[r * spec.width + c] = std::clamp(0.7 * blob + 0.25 * stripe + noise(rng), 0.0, 1.0);
      }
    }
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
  return out;
}

std::vector<double> pixel_positions(const ImageShape& shape) {
  auto norm = [](std::size_t i, std::size_t n) { return n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0; };
  std::vector<double> pos;
  pos.reserve(shape.size() * 3);
  for (std::size_t r = 0; r < shape.height; ++r)
    for (std::size_t c = 0; c < shape.width; ++c)
      for (std::size_t ch = 0; ch < shape.channels; ++ch) {
        pos.push_back(norm(r, shape.height));
        pos.push_back(norm(c, shape.width));
        pos.push_back(norm(ch, shape.channels));
      }
  return pos;
}

}  // namespace npattack
