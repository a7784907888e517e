#include "aft/rng.hpp"

#include <cmath>
#include <numbers>

namespace aft {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t Rng::mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() noexcept {
  ++counter_;
  return mix(seed_ + counter_ * kGolden);
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  const auto r = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
  return r < n ? r : n - 1;
}

double Rng::normal(double mean, double stddev) noexcept {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::derive(std::uint64_t stream) const noexcept {
  return Rng(mix(seed_ ^ mix(stream + kGolden)));
}

}  // namespace aft
