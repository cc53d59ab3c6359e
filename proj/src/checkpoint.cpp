#include "npattack/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "npattack/error.hpp"
#include "npattack/image.hpp"

namespace npattack {
namespace {

constexpr std::uint64_t kMaxRank = 8;

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint64_t le(int bytes, const char* what) {
    if (b_.size() - pos_ < static_cast<std::size_t>(bytes))
      throw ParseError(std::string("checkpoint truncated reading ") + what, pos_);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

}  // namespace

std::vector<std::uint8_t> encode_container(const Container& c) {
  std::vector<std::uint8_t> out(c.magic.begin(), c.magic.end());
  put_le(out, c.header.size(), 4);
  for (std::uint64_t h : c.header) put_le(out, h, 8);
  put_le(out, c.tensors.size(), 4);
  for (const Tensor& t : c.tensors) {
    put_le(out, t.rank(), 4);
    for (std::size_t e : t.shape()) put_le(out, e, 8);
    for (double v : t.values()) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

Container decode_container(std::span<const std::uint8_t> bytes, std::array<char, 4> expected_magic) {
  if (bytes.size() < 4) throw ParseError("checkpoint truncated reading magic", 0);
  if (std::memcmp(bytes.data(), expected_magic.data(), 4) != 0)
    throw ParseError("checkpoint: bad magic, expected " + std::string(expected_magic.data(), 4), 0);
  Container c;
  c.magic = expected_magic;
  Reader r(bytes.subspan(4));
  const std::uint64_t nh = r.le(4, "header count");
  if (nh > r.remaining() / 8) throw ParseError("checkpoint: header count exceeds file size", 4);
  for (std::uint64_t i = 0; i < nh; ++i) c.header.push_back(r.le(8, "header"));
  const std::uint64_t nt = r.le(4, "tensor count");
  for (std::uint64_t i = 0; i < nt; ++i) {
    const std::size_t at = r.pos() + 4;
    const std::uint64_t rank = r.le(4, "tensor rank");
    if (rank == 0 || rank > kMaxRank) throw ParseError("checkpoint: invalid tensor rank " + std::to_string(rank), at);
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      const std::uint64_t e = r.le(8, "tensor extent");
      if (e == 0 || e > r.remaining()) throw ParseError("checkpoint: invalid tensor extent", r.pos() + 4 - 8);
      count *= e;
      shape.push_back(e);
    }
    if (count > r.remaining() / 8) throw ParseError("checkpoint truncated reading tensor values", r.pos() + 4);
    std::vector<double> values(count);
    for (double& v : values) v = std::bit_cast<double>(r.le(8, "tensor value"));
    c.tensors.emplace_back(std::move(shape), std::move(values));
  }
  if (r.remaining() != 0) throw ParseError("checkpoint: trailing bytes", r.pos() + 4);
  return c;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  const auto bytes = encode_container(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path, std::array<char, 4> expected_magic) {
  const auto bytes = read_file(path);
  return decode_container(bytes, expected_magic);
}

void check_shape_table(const std::vector<Tensor>& loaded, const std::vector<const Tensor*>& expected) {
  if (loaded.size() != expected.size())
    throw ParseError("checkpoint: shape table has " + std::to_string(loaded.size()) + " tensors, expected " +
                     std::to_string(expected.size()));
  for (std::size_t i = 0; i < loaded.size(); ++i)
    if (loaded[i].shape() != expected[i]->shape())
      throw ParseError("checkpoint: tensor " + std::to_string(i) + " has shape " + shape_string(loaded[i].shape()) +
                       ", expected " + shape_string(expected[i]->shape()));
}

}  // namespace npattack
