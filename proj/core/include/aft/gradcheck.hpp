#pragma once

#include <functional>
#include <string>
#include <vector>

#include "aft/tensor.hpp"

namespace aft::gradcheck {

inline constexpr double kDefaultStep = 1e-5;
/// Floor of the relative-error denominator max(|analytic|, |numeric|, floor).
inline constexpr double kRelativeFloor = 1e-8;

struct NamedParam {
  std::string name;
  Tensor* value;
};

using LossFn = std::function<double()>;

/// Central differences (f(theta + h) - f(theta - h)) / 2h for every scalar of
/// every parameter. Parameters are perturbed in place and restored exactly.
/// Throws NumericError naming the parameter if the loss is non-finite.
std::vector<Tensor> finite_diff(const LossFn& loss, const std::vector<NamedParam>& params,
                                double step = kDefaultStep);

/// Relative errors above this are kept individually so a caller can tell
/// round-off on a tiny gradient from a wrong one.
inline constexpr double kOutlierRel = 1e-7;

struct Outlier {
  double rel;
  double abs;
};

struct GradEntry {
  std::string name;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t count = 0;
  std::vector<Outlier> outliers;
};

struct GradReport {
  std::vector<GradEntry> entries;
  double step = kDefaultStep;

  double max_rel() const noexcept;
  double max_abs() const noexcept;
};

double relative_error(double analytic, double numeric) noexcept;

GradReport compare(const std::vector<std::string>& names, const std::vector<Tensor>& analytic,
                   const std::vector<Tensor>& numeric, double step = kDefaultStep);

/// finite_diff + compare in one call.
GradReport check(const LossFn& loss, const std::vector<NamedParam>& params, const std::vector<Tensor>& analytic,
                 double step = kDefaultStep);

/// Loss <dy, y> used throughout the layer gradient checks.
double inner(const Tensor& a, const Tensor& b);

}  // namespace aft::gradcheck
