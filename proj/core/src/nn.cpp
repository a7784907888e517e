#include "aft/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "aft/errors.hpp"

namespace aft::nn {

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, LayerNormCache* cache) {
  if (x.rank() != 2) throw DimensionError("layer_norm expects [N x d], got " + to_string(x.shape()));
  const std::size_t N = x.dim(0), d = x.dim(1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw DimensionError("layer_norm gain/bias must be [" + std::to_string(d) + "]");
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  Tensor rstd({N});
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = x.ptr() + n * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    rstd[n] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * r;
      xhat[n * d + j] = h;
      y[n * d + j] = h * gain[j] + bias[j];
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(rstd)};
  return y;
}

LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gain, const Tensor& dy) {
  const std::size_t N = cache.xhat.dim(0), d = cache.xhat.dim(1);
  if (dy.shape() != cache.xhat.shape()) throw DimensionError("layer_norm_backward: dy shape mismatch");
  LayerNormGrads g{Tensor(dy.shape()), Tensor({d}), Tensor({d})};
  std::vector<double> dh(d);
  for (std::size_t n = 0; n < N; ++n) {
    const double* xh = cache.xhat.ptr() + n * d;
    const double* gy = dy.ptr() + n * d;
    double mean_dh = 0.0, mean_dh_xh = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      g.dgain[j] += gy[j] * xh[j];
      g.dbias[j] += gy[j];
      dh[j] = gy[j] * gain[j];
      mean_dh += dh[j];
      mean_dh_xh += dh[j] * xh[j];
    }
    mean_dh /= static_cast<double>(d);
    mean_dh_xh /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) g.dx[n * d + j] = cache.rstd[n] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
  }
  return g;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (!b.empty()) {
    const std::size_t out = w.dim(1);
    if (b.shape() != Shape{out}) throw DimensionError("linear bias must be [" + std::to_string(out) + "]");
    for (std::size_t n = 0; n < y.dim(0); ++n)
      for (std::size_t j = 0; j < out; ++j) y[n * out + j] += b[j];
  }
  return y;
}

LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, bool with_bias) {
  LinearGrads g{matmul(dy, transpose(w)), matmul(transpose(x), dy), {}};
  if (with_bias) g.db = sum_over(dy, 0);
  return g;
}

namespace {
double phi(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }
}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * phi(x[i]);
  return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  const double c = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    dx[i] = dy[i] * (phi(v) + v * c * std::exp(-0.5 * v * v));
  }
  return dx;
}

Tensor dropout_mask(Rng& rng, const Shape& shape, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  if (rate == 0.0) return {};
  Tensor m(shape);
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform() < rate ? 0.0 : keep;
  return m;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& weight,
                     Tensor* dlogits) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [N x V] logits");
  const std::size_t N = logits.dim(0), V = logits.dim(1);
  if (targets.size() != N || weight.size() != N) throw DimensionError("cross_entropy: target/weight count mismatch");
  double count = 0.0;
  for (double w : weight) count += w;
  if (count <= 0.0) throw UsageError("cross_entropy: no positions carry loss");
  if (dlogits) *dlogits = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (weight[n] == 0.0) continue;
    const int tgt = targets[n];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= V) throw DimensionError("cross_entropy: target out of range");
    const double* row = logits.ptr() + n * V;
    const double m = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - m);
    const double lz = std::log(z);
    total += weight[n] * (lz - (row[tgt] - m));
    if (dlogits) {
      double* g = dlogits->ptr() + n * V;
      for (std::size_t j = 0; j < V; ++j) g[j] = weight[n] * std::exp(row[j] - m - lz) / count;
      g[tgt] -= weight[n] / count;
    }
  }
  const double loss = total / count;
  if (!std::isfinite(loss)) throw NumericError("cross-entropy loss is not finite");
  return loss;
}

}  // namespace aft::nn
