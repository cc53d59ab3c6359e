#include "npattack/oracle.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "npattack/error.hpp"

namespace npattack {

std::vector<double> Oracle::query_batch(std::span<const double> images, std::size_t n) {
  NPATTACK_REQUIRE(n >= 1 && images.size() % n == 0, "query_batch: buffer is not n images");
  const std::size_t d = images.size() / n;
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = query(images.subspan(i * d, d));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::uint64_t image_digest(std::span<const double> image) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : image) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

QueryOracle::QueryOracle(const Classifier& clf, OracleOptions options) : clf_(&clf), options_(options) {}

void QueryOracle::reset() {
  std::lock_guard lock(mutex_);
  count_ = 0;
  violations_ = 0;
  log_.clear();
  cache_.clear();
}

void QueryOracle::set_guard(const Image& center, double epsilon) {
  NPATTACK_REQUIRE(center.size() == image_size(), "set_guard: center has wrong size");
  std::lock_guard lock(mutex_);
  guard_center_ = center;
  guard_epsilon_ = epsilon;
}

void QueryOracle::clear_guard() {
  std::lock_guard lock(mutex_);
  guard_center_.reset();
}

std::vector<QueryLogEntry> QueryOracle::log() const {
  std::lock_guard lock(mutex_);
  return log_;
}

void QueryOracle::check_and_guard(std::span<const double> image) {
  NPATTACK_REQUIRE(image.size() == image_size(), "query: image has wrong size");
  for (double v : image) NPATTACK_REQUIRE(v >= 0.0 && v <= 1.0, "query: pixel outside [0,1]");
  std::lock_guard lock(mutex_);
  if (!guard_center_) return;
  const Image& c = *guard_center_;
  for (std::size_t i = 0; i < image.size(); ++i)
    if (std::abs(image[i] - c[i]) > guard_epsilon_ + 1e-12) {
      ++violations_;
      return;
    }
}

std::vector<double> QueryOracle::query(std::span<const double> image) {
  return query_batch(image, 1);
}

std::vector<double> QueryOracle::query_batch(std::span<const double> images, std::size_t n) {
  NPATTACK_REQUIRE(n >= 1 && images.size() == n * image_size(), "query_batch: buffer is not n images");
  const std::size_t d = image_size();
  for (std::size_t i = 0; i < n; ++i) check_and_guard(images.subspan(i * d, d));
  count_ += n;

  const std::size_t k = static_cast<std::size_t>(classes());
  std::vector<double> out(n * k);
  std::vector<std::uint64_t> digests(n);
  std::vector<std::size_t> misses;
  {
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < n; ++i) {
      if (options_.cache || options_.log) digests[i] = image_digest(images.subspan(i * d, d));
      if (options_.cache) {
        if (auto it = cache_.find(digests[i]); it != cache_.end()) {
          std::copy(it->second.begin(), it->second.end(), out.begin() + i * k);
          continue;
        }
      }
      misses.push_back(i);
    }
  }
  if (!misses.empty()) {
    Tensor batch(Shape{misses.size(), d});
    for (std::size_t m = 0; m < misses.size(); ++m)
      std::copy_n(images.begin() + misses[m] * d, d, batch.values().begin() + m * d);
    const Tensor lp = log_probabilities(*clf_, batch);
    for (std::size_t m = 0; m < misses.size(); ++m)
      for (std::size_t j = 0; j < k; ++j) out[misses[m] * k + j] = std::exp(lp.at(m, j));
  }
  if (options_.cache || options_.log) {
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = std::span<const double>(out).subspan(i * k, k);
      if (options_.cache) cache_.try_emplace(digests[i], row.begin(), row.end());
      if (options_.log)
        log_.push_back({digests[i], static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin())});
    }
  }
  return out;
}

}  // namespace npattack
