#pragma once

#include <cstdint>
#include <vector>

#include "aft/rng.hpp"
#include "aft/tensor.hpp"

// Small building blocks for the training model. All activations are [N x d]
// with N = batch * length.
namespace aft::nn {

inline constexpr double kLayerNormEpsilon = 1e-5;

struct LayerNormCache {
  Tensor xhat;  // normalized input
  Tensor rstd;  // [N], 1 / sqrt(var + eps)
};

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, LayerNormCache* cache);

struct LayerNormGrads {
  Tensor dx, dgain, dbias;
};
LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gain, const Tensor& dy);

/// y = x W + b, W: [in x out], b: [out] (may be empty).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

struct LinearGrads {
  Tensor dx, dw, db;
};
LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, bool with_bias);

/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& dy);

/// Inverted dropout mask: entries are 0 or 1 / (1 - rate). Empty when rate is 0.
Tensor dropout_mask(Rng& rng, const Shape& shape, double rate);

/// Mean cross-entropy over rows with weight[n] > 0 (weights are 0 or 1).
/// Writes d loss / d logits into dlogits when non-null.
double cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& weight,
                     Tensor* dlogits);

}  // namespace aft::nn
