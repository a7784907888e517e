#pragma once

#include <cstdint>

namespace aft {

/// Counter-based generator. Draw n (0-based) of a stream with seed S is
///
///   z = S + (n + 1) * 0x9E3779B97F4A7C15          (mod 2^64)
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   out = z ^ (z >> 31)
///
/// i.e. the SplitMix64 finalizer applied to a Weyl sequence. The integer stream
/// is identical on every platform. uniform() maps the top 53 bits onto [0, 1).
/// normal() uses the Box-Muller cosine branch on two consecutive uniforms, so
/// each normal consumes exactly two draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1).
  double uniform() noexcept;
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal(double mean = 0.0, double stddev = 1.0) noexcept;

  /// Independent stream derived from this generator's seed and `stream`.
  /// Does not advance this generator.
  Rng derive(std::uint64_t stream) const noexcept;

  static std::uint64_t mix(std::uint64_t z) noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace aft
