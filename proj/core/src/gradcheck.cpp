#include "aft/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "aft/errors.hpp"

namespace aft::gradcheck {

std::vector<Tensor> finite_diff(const LossFn& loss, const std::vector<NamedParam>& params, double step) {
  if (!(step > 0.0)) throw ConfigError("finite difference step must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    Tensor g = Tensor::zeros_like(*p.value);
    for (std::size_t i = 0; i < p.value->numel(); ++i) {
      double& theta = (*p.value)[i];
      const double saved = theta;
      // divide by the perturbation actually representable in theta
      const double hi = saved + step, lo = saved - step;
      theta = hi;
      const double up = loss();
      theta = lo;
      const double down = loss();
      theta = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("non-finite loss while perturbing " + p.name + "[" + std::to_string(i) + "]");
      g[i] = (up - down) / (hi - lo);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double relative_error(double analytic, double numeric) noexcept {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelativeFloor});
  return std::abs(analytic - numeric) / denom;
}

double GradReport::max_rel() const noexcept {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel);
  return m;
}

double GradReport::max_abs() const noexcept {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_abs);
  return m;
}

GradReport compare(const std::vector<std::string>& names, const std::vector<Tensor>& analytic,
                   const std::vector<Tensor>& numeric, double step) {
  if (names.size() != analytic.size() || analytic.size() != numeric.size())
    throw DimensionError("gradcheck::compare: name/analytic/numeric counts differ");
  GradReport report;
  report.step = step;
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (analytic[k].shape() != numeric[k].shape())
      throw DimensionError("gradient shape mismatch for " + names[k] + ": " + to_string(analytic[k].shape()) +
                           " vs " + to_string(numeric[k].shape()));
    GradEntry e{names[k]};
    e.count = analytic[k].numel();
    for (std::size_t i = 0; i < analytic[k].numel(); ++i) {
      const double a = analytic[k][i], n = numeric[k][i];
      if (!std::isfinite(a)) throw NumericError("non-finite analytic gradient for " + names[k]);
      const double abs = std::abs(a - n), rel = relative_error(a, n);
      e.max_abs = std::max(e.max_abs, abs);
      e.max_rel = std::max(e.max_rel, rel);
      if (rel > kOutlierRel) e.outliers.push_back({rel, abs});
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

GradReport check(const LossFn& loss, const std::vector<NamedParam>& params, const std::vector<Tensor>& analytic,
                 double step) {
  std::vector<std::string> names;
  for (const auto& p : params) names.push_back(p.name);
  return compare(names, analytic, finite_diff(loss, params, step), step);
}

double inner(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("inner: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(s);
}

}  // namespace aft::gradcheck
