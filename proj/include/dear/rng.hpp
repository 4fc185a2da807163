#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dear {

/// Counter-based SplitMix64 stream.
///
/// Draw i (0-based) of a stream with key k is mix64(k + (i + 1) * 0x9E3779B97F4A7C15),
/// where mix64 is the SplitMix64 finalizer. A child stream is keyed by
/// mix64(k ^ mix64(id + 0x9E3779B97F4A7C15)), so independent consumers
/// (dataset, backbone init, batch order) never share draws. Any language
/// with 64-bit wrapping arithmetic reproduces the same streams.
class CounterRng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit CounterRng(std::uint64_t key) : key_(key) {}

  static constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  CounterRng split(std::uint64_t stream_id) const {
    return CounterRng(mix64(key_ ^ mix64(stream_id + kGolden)));
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dear
