#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace npattack {

// Broken precondition or shape contract. Maps to CLI exit code 1.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed input file or config. Maps to CLI exit code 2.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_ = 0;
};

// Missing file, unwritable directory, short read. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define NPATTACK_REQUIRE(cond, msg)                                  \
  do {                                                               \
    if (!(cond)) throw ::npattack::ContractViolation(msg);           \
  } while (0)

}  // namespace npattack
