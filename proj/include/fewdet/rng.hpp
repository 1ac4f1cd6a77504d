#pragma once

#include <cmath>
#include <cstdint>

namespace fewdet {

/// Deterministic splitmix64 stream with cheap splitting.
///
/// fork(tag) derives a child stream from the *construction* seed and the tag,
/// independent of how many values the parent has produced. Sampling one
/// sub-stream therefore never shifts another, which is what makes per-class
/// shot sampling and per-record noise draws order-independent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  /// Child stream keyed by (seed, tag).
  Rng fork(std::uint64_t tag) const {
    return Rng(mix(seed_ + 0x9E3779B97F4A7C15ull * (tag + 0x632BE59BD9B4E019ull)));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Unbiased uniform integer in [0, n). n must be nonzero.
  std::uint64_t uniform_below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Standard normal via Box-Muller (two uniforms per draw, no cached spare,
  /// so the stream position is a pure function of the draw count).
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform01();
    const double z = std::sqrt(-2.0 * std::log(u1)) *
                     std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    return mean + stddev * z;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace fewdet
