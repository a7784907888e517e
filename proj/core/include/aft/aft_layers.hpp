#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <variant>

#include "aft/rng.hpp"
#include "aft/tensor.hpp"

namespace aft {

enum class Variant { Full, Local, Simple, Conv };

std::string_view to_string(Variant v) noexcept;
/// Accepts "full", "local", "simple", "conv". Throws ConfigError otherwise.
Variant parse_variant(std::string_view name);

struct LayerMode {
  /// Context sums run over t' <= t only.
  bool causal = false;
  /// Local variant only: out-of-window biases become -inf instead of 0, which
  /// removes global connectivity. Ablation switch, off by default.
  bool hard_window = false;
};

struct DenseBias {
  Tensor w;  // [Tmax x Tmax], sequences of length T use the top-left block
};

/// w[t, t'] = dot(u[t], v[t']).
struct FactorizedBias {
  Tensor u;  // [T x d']
  Tensor v;  // [T x d']
};

/// Learned pairwise position bias, either a dense matrix or a low-rank factorization.
struct PositionBias {
  std::variant<DenseBias, FactorizedBias> param;

  static PositionBias dense(Tensor w);
  static PositionBias factorized(Tensor u, Tensor v);

  bool is_factorized() const noexcept { return std::holds_alternative<FactorizedBias>(param); }
  /// Largest sequence length this bias supports.
  std::size_t rows() const noexcept;
  std::size_t parameter_count() const noexcept;
  /// Unmasked w[t, t'] for t' in [begin, end), written to out[0 .. end-begin).
  void row(std::size_t t, std::size_t begin, std::size_t end, double* out) const;

  /// Zero tensors mirroring this parameterization.
  PositionBias zeros_like() const;
};

/// Projection matrices shared by the full, local and simple variants, all [d x d].
/// Row-vector convention: Q = X Wq, Y = G Wo.
struct Projections {
  Tensor wq, wk, wv, wo;

  std::size_t width() const { return wq.dim(0); }
  Projections zeros_like() const;
};

struct AftFullParams {
  Projections proj;
  PositionBias bias;
};

struct AftConvParams {
  std::size_t heads = 1;
  std::size_t kernel = 1;  // odd
  Tensor wq;     // [d x d]
  Tensor wk;     // [d x h]
  Tensor wv;     // [d x d]
  Tensor w_raw;  // [h x s x s]
  Tensor gamma;  // [h]
  Tensor beta;   // [h]

  std::size_t width() const { return wq.dim(0); }
  AftConvParams zeros_like() const;
};

Projections init_projections(Rng& rng, std::size_t d, double stddev);
PositionBias init_dense_bias(Rng& rng, std::size_t T, double stddev);
PositionBias init_factorized_bias(Rng& rng, std::size_t T, std::size_t rank, double stddev);
/// gamma and beta start at zero, which makes the initial conv bias exactly zero.
AftConvParams init_conv_params(Rng& rng, std::size_t d, std::size_t heads, std::size_t kernel,
                               double proj_stddev, double bias_stddev);

/// Intermediates saved by a forward pass. Row-major [B*T x ...] layouts.
struct AftCache {
  Variant variant = Variant::Full;
  LayerMode mode{};
  std::size_t window = 0;
  std::size_t batch = 0, length = 0, width = 0;
  std::size_t grid_h = 0, grid_w = 0;
  bool batched = false;
  std::uint64_t fingerprint = 0;

  Tensor x;      // flattened input
  Tensor q, k, v;
  Tensor avg;    // normalized weighted value average A
  Tensor shift;  // exponent shift used per (row, channel)
  Tensor denom;  // normalizer relative to shift
  Tensor gated;  // sigmoid(q) * avg (input of Wo)

  // conv only
  Tensor bias;     // reparameterized w', [h x s x s]
  Tensor kernel;   // exp(w') - 1, [h x s x s]
  Tensor exp_key;  // exp(K - max K) per head, [B*T x h]
};

struct AftForward {
  Tensor y;
  AftCache cache;  // left default when keep_cache is false
};

/// x: [T x d] or [B x T x d].
AftForward aft_full_forward(const Tensor& x, const AftFullParams& p, LayerMode mode, bool keep_cache = true);
/// Window s: biases kept for |t - t'| < s. 0 <= s <= T. Runs in O(T s d).
AftForward aft_local_forward(const Tensor& x, const AftFullParams& p, std::size_t window, LayerMode mode,
                             bool keep_cache = true);
/// No position bias; O(T d) in both modes.
AftForward aft_simple_forward(const Tensor& x, const Projections& p, LayerMode mode, bool keep_cache = true);
/// x: [H x W x d] or [B x H x W x d]. Non-causal.
AftForward aft_conv_forward(const Tensor& x, const AftConvParams& p, bool keep_cache = true);

/// Dense [T x T] bias with masks applied: entries excluded from the context
/// sum (causal future, hard-window outside) are -inf; soft-window outside is 0.
Tensor materialize_bias(const PositionBias& b, std::size_t T, LayerMode mode,
                        std::optional<std::size_t> window = std::nullopt);

inline constexpr double kReparamEpsilon = 1e-8;

/// Per-head standardization with gain and offset:
/// w'_i = gamma_i * (w_i - mean(w_i)) / (std(w_i) + eps) + beta_i, population std.
Tensor reparameterize_bias(const Tensor& w_raw, const Tensor& gamma, const Tensor& beta);

struct ReparamGrads {
  Tensor dw_raw, dgamma, dbeta;
};
ReparamGrads reparameterize_bias_backward(const Tensor& w_raw, const Tensor& gamma, const Tensor& dw);

struct ProjectionGrads {
  Tensor dwq, dwk, dwv, dwo;
};

struct AftFullGrads {
  Tensor dx;
  ProjectionGrads proj;
  PositionBias dbias;
};

struct AftSimpleGrads {
  Tensor dx;
  ProjectionGrads proj;
};

struct AftConvGrads {
  Tensor dx;
  Tensor dwq, dwk, dwv, dw_raw, dgamma, dbeta;
};

// Gradients of <dy, y>. The cache must come from the matching forward with the
// same parameters; otherwise UsageError.
AftFullGrads aft_full_backward(const AftCache& cache, const AftFullParams& p, const Tensor& dy);
AftFullGrads aft_local_backward(const AftCache& cache, const AftFullParams& p, const Tensor& dy);
AftSimpleGrads aft_simple_backward(const AftCache& cache, const Projections& p, const Tensor& dy);
AftConvGrads aft_conv_backward(const AftCache& cache, const AftConvParams& p, const Tensor& dy);

/// Normalized value weights for query position t of batch element b:
/// result[t', i] = exp(K[t', i] + w[t, t'] - shift) / denom. Excludes the
/// query gate. Works for full, local and simple caches (bias ignored for simple).
Tensor value_weights(const AftCache& cache, const PositionBias* bias, std::size_t b, std::size_t t);

std::uint64_t fingerprint(const Projections& p) noexcept;
std::uint64_t fingerprint(const AftFullParams& p) noexcept;
std::uint64_t fingerprint(const AftConvParams& p) noexcept;

}  // namespace aft
