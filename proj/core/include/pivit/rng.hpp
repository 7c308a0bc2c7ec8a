#pragma once

#include <cstdint>
#include <random>

namespace pivit {

/// Seeded generator used everywhere randomness is needed. Streams derived
/// with `fork` are independent of how much the parent has been consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  Rng fork(std::uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + 0x9e3779b97f4a7c15ULL))); }

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Normal truncated to +-2 standard deviations (resampled).
  double truncated_normal(double stddev) {
    for (;;) {
      const double v = normal(0.0, 1.0);
      if (v >= -2.0 && v <= 2.0) return v * stddev;
    }
  }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::mt19937_64& engine() { return engine_; }
  std::uint64_t seed() const { return seed_; }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace pivit
