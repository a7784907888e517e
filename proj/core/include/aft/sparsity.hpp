#pragma once

#include "aft/rng.hpp"
#include "aft/tensor.hpp"

namespace aft::sparsity {

/// Default weight of the entropy regularizer when added to a training loss.
inline constexpr double kEntropyWeight = 0.001;
inline constexpr double kDefaultTemperature = 0.5;
inline constexpr double kUniformClamp = 1e-12;

/// reg(w) = sum_i H(softmax(w_i)), natural log, w: [h x n] (conv kernels flattened to n = s*s).
double entropy_reg(const Tensor& w);
/// d reg / d w.
Tensor entropy_reg_grad(const Tensor& w);

struct GumbelConfig {
  double tau = kDefaultTemperature;
  bool train_mode = true;
};

struct GumbelMask {
  Tensor masked;  // w * gate
  Tensor gate;    // soft sample (train) or one-hot argmax (eval), rows sum to 1
  Tensor noise;   // standard Gumbel draws used in train mode; empty in eval mode
};

/// Train mode: w_i * softmax((w_i + G) / tau), G = -ln(-ln U), U clamped to
/// [1e-12, 1 - 1e-12]. Eval mode: w_i * onehot(argmax w_i), lowest index wins ties.
GumbelMask gumbel_mask(const Tensor& w, const GumbelConfig& cfg, Rng& rng);

/// Gradient of <dout, masked> w.r.t. w for a train-mode mask, with the noise
/// held fixed and gradients flowing through the softmax gate.
Tensor gumbel_mask_backward(const Tensor& w, const GumbelMask& mask, double tau, const Tensor& dout);

}  // namespace aft::sparsity
