#pragma once

#include <optional>
#include <vector>

#include "aft/aft_layers.hpp"
#include "aft/tensor.hpp"

// Slow, direct implementations used as ground truth by tests and by the
// benchmark's quadratic-memory contrast. No caching, no running sums.
namespace aft::oracle {

struct MhaParams {
  std::size_t heads = 1;
  std::vector<Tensor> wq, wk, wv;  // per head: [d x d_k], [d x d_k], [d x d_v]
};

MhaParams init_mha_params(Rng& rng, std::size_t d, std::size_t heads, double stddev);

/// Scaled dot-product multi-head self attention, heads concatenated along channels.
Tensor mha_forward(const Tensor& x, const MhaParams& p, bool causal);

/// Per-dimension attention tensor a[i, t, t'] including the sigmoid(Q[t, i])
/// gate. w: dense [T x T] bias, -inf entries excluded. Returns [d x T x T].
Tensor aft_attention_matrices(const Tensor& q, const Tensor& k, const Tensor& w, LayerMode mode);

/// Full/local AFT forward through explicit attention matrices, including Wo.
/// x: [T x d]. With `window`, the bias is masked as in the local variant.
Tensor aft_via_attention(const Tensor& x, const AftFullParams& p, LayerMode mode,
                         std::optional<std::size_t> window = std::nullopt);

/// AFT-conv by direct double sum over the flattened grid with relative biases.
/// x: [H x W x d] or [B x H x W x d].
Tensor aft_conv_direct(const Tensor& x, const AftConvParams& p);

}  // namespace aft::oracle
