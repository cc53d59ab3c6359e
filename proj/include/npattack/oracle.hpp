#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "npattack/classifier.hpp"
#include "npattack/image.hpp"

namespace npattack {

// Score-returning black box. Attacks see nothing else.
class Oracle {
 public:
  virtual ~Oracle() = default;

  // Softmax probabilities for one image; counts one query.
  virtual std::vector<double> query(std::span<const double> image) = 0;
  // n images stored back to back; counts n queries. Returns n rows of
  // probabilities, row-major.
  virtual std::vector<double> query_batch(std::span<const double> images, std::size_t n);
  virtual std::uint64_t query_count() const = 0;
};

struct QueryLogEntry {
  std::uint64_t digest = 0;
  int predicted = 0;
};

struct OracleOptions {
  bool cache = false;
  bool log = false;
};

std::uint64_t image_digest(std::span<const double> image);

class QueryOracle final : public Oracle {
 public:
  explicit QueryOracle(const Classifier& clf, OracleOptions options = {});

  std::vector<double> query(std::span<const double> image) override;
  std::vector<double> query_batch(std::span<const double> images, std::size_t n) override;
  std::uint64_t query_count() const override { return count_.load(); }
  void reset();

  // Test hook: every later query is checked against the L∞ ball of radius
  // epsilon around center (plus 1e-12 slack); violations are counted, not
  // thrown.
  void set_guard(const Image& center, double epsilon);
  void clear_guard();
  std::uint64_t guard_violations() const { return violations_.load(); }

  std::vector<QueryLogEntry> log() const;
  std::size_t image_size() const { return clf_->image.size(); }
  int classes() const { return clf_->classes(); }

 private:
  void check_and_guard(std::span<const double> image);

  const Classifier* clf_;
  OracleOptions options_;
  std::atomic<std::uint64_t> count_{0};
  std::atomic<std::uint64_t> violations_{0};
  mutable std::mutex mutex_;
  std::optional<Image> guard_center_;
  double guard_epsilon_ = 0.0;
  std::vector<QueryLogEntry> log_;
  std::unordered_map<std::uint64_t, std::vector<double>> cache_;
};

}  // namespace npattack
