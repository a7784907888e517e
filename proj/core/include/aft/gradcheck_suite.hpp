#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aft/gradcheck.hpp"

namespace aft::gradcheck {

struct SuiteResult {
  std::string op;
  std::size_t cases = 0;
  std::size_t entries = 0;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::vector<Outlier> outliers;
};

/// Analytic vs. central-difference gradients for every differentiable op over
/// small shapes (T <= 6, d <= 4, grids up to 4x4), one row per op.
std::vector<SuiteResult> run_suite(std::uint64_t seed);

/// Loss round-off at h = 1e-5 in f64 is about eps * |loss| / h, so any
/// numeric gradient carries an absolute error of order 1e-11..1e-10. An entry
/// over the relative tolerance with an absolute error below this bound is
/// indistinguishable from round-off.
inline constexpr double kRoundoffBound = 1e-9;

struct Breakdown {
  std::size_t over = 0;           // entries with relative error >= tol
  std::size_t over_roundoff = 0;  // of those, |a - fd| above kRoundoffBound
  double over_max_abs = 0.0;
};

Breakdown breakdown(const SuiteResult& r, double tol) noexcept;

}  // namespace aft::gradcheck
