#include "aft/sparsity.hpp"

#include <algorithm>
#include <cmath>

#include "aft/errors.hpp"

namespace aft::sparsity {

namespace {

void check_rows(const Tensor& w, const char* op) {
  if (w.rank() != 2) throw DimensionError(std::string(op) + ": expected [h x n], got " + to_string(w.shape()));
}

}  // namespace

double entropy_reg(const Tensor& w) {
  check_rows(w, "entropy_reg");
  const Tensor p = softmax_lastdim(w);
  const std::size_t n = w.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    // H = logsumexp(w) - sum p w, which stays exact when some p underflow.
    const double* row = w.ptr() + i * n;
    const double m = *std::max_element(row, row + n);
    double z = 0.0, pw = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - m);
    for (std::size_t j = 0; j < n; ++j) pw += p[i * n + j] * (row[j] - m);
    total += std::max(0.0, std::log(z) - pw);
  }
  return total;
}

Tensor entropy_reg_grad(const Tensor& w) {
  check_rows(w, "entropy_reg_grad");
  const Tensor p = softmax_lastdim(w);
  const std::size_t n = w.dim(1);
  Tensor g(w.shape());
  // dH/dw_j = -p_j (w_j - sum_k p_k w_k)
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    const double* row = w.ptr() + i * n;
    const double* pr = p.ptr() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += pr[j] * row[j];
    for (std::size_t j = 0; j < n; ++j) g[i * n + j] = -pr[j] * (row[j] - mean);
  }
  return g;
}

GumbelMask gumbel_mask(const Tensor& w, const GumbelConfig& cfg, Rng& rng) {
  check_rows(w, "gumbel_mask");
  if (!(cfg.tau > 0.0)) throw ConfigError("Gumbel temperature must be positive");
  const std::size_t h = w.dim(0), n = w.dim(1);
  GumbelMask out;
  if (!cfg.train_mode) {
    out.gate = Tensor(w.shape());
    for (std::size_t i = 0; i < h; ++i) {
      const double* row = w.ptr() + i * n;
      const std::size_t j = static_cast<std::size_t>(std::max_element(row, row + n) - row);
      out.gate[i * n + j] = 1.0;
    }
  } else {
    out.noise = Tensor(w.shape());
    Tensor logits(w.shape());
    for (std::size_t k = 0; k < w.numel(); ++k) {
      const double u = std::clamp(rng.uniform(), kUniformClamp, 1.0 - kUniformClamp);
      out.noise[k] = -std::log(-std::log(u));
      logits[k] = (w[k] + out.noise[k]) / cfg.tau;
    }
    out.gate = softmax_lastdim(logits);
  }
  out.masked = mul(w, out.gate);
  return out;
}

Tensor gumbel_mask_backward(const Tensor& w, const GumbelMask& mask, double tau, const Tensor& dout) {
  if (dout.shape() != w.shape() || mask.gate.shape() != w.shape())
    throw DimensionError("gumbel_mask_backward: shape mismatch");
  const std::size_t n = w.dim(1);
  Tensor g(w.shape());
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    const double* s = mask.gate.ptr() + i * n;
    const double* wr = w.ptr() + i * n;
    const double* dr = dout.ptr() + i * n;
    if (mask.noise.empty()) {
      // hard one-hot: gate is piecewise constant
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] = dr[j] * s[j];
      continue;
    }
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += s[j] * dr[j] * wr[j];
    for (std::size_t j = 0; j < n; ++j) g[i * n + j] = dr[j] * s[j] + s[j] * (dr[j] * wr[j] - dot) / tau;
  }
  return g;
}

}  // namespace aft::sparsity
