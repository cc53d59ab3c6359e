#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "npattack/tensor.hpp"

namespace npattack {

// Binary container shared by model checkpoints:
//   magic[4] | u32 header count | u64 header... | u32 tensor count |
//   per tensor: u32 rank, u64 extents..., f64 values (all little-endian).
struct Container {
  std::array<char, 4> magic{};
  std::vector<std::uint64_t> header;
  std::vector<Tensor> tensors;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes, std::array<char, 4> expected_magic);

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path, std::array<char, 4> expected_magic);

// Checks loaded tensor shapes against the expected ones; throws ParseError
// naming the first mismatch.
void check_shape_table(const std::vector<Tensor>& loaded, const std::vector<const Tensor*>& expected);

}  // namespace npattack
