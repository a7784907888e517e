#include "aft/reference_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aft/errors.hpp"

namespace aft::oracle {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double sigmoid1(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

MhaParams init_mha_params(Rng& rng, std::size_t d, std::size_t heads, double stddev) {
  if (heads == 0 || d % heads != 0) throw ConfigError("MHA needs heads dividing d");
  MhaParams p;
  p.heads = heads;
  const std::size_t dk = d / heads;
  for (std::size_t i = 0; i < heads; ++i) {
    p.wq.push_back(randn(rng, {d, dk}, 0.0, stddev));
    p.wk.push_back(randn(rng, {d, dk}, 0.0, stddev));
    p.wv.push_back(randn(rng, {d, dk}, 0.0, stddev));
  }
  return p;
}

Tensor mha_forward(const Tensor& x, const MhaParams& p, bool causal) {
  if (x.rank() != 2) throw DimensionError("mha_forward expects [T x d], got " + to_string(x.shape()));
  const std::size_t T = x.dim(0), d = x.dim(1);
  if (p.heads == 0 || d % p.heads != 0)
    throw ConfigError("MHA heads (" + std::to_string(p.heads) + ") must divide d (" + std::to_string(d) + ")");
  if (p.wq.size() != p.heads || p.wk.size() != p.heads || p.wv.size() != p.heads)
    throw DimensionError("MHA parameter lists must have one entry per head");
  const std::size_t dv = p.wv.front().dim(1);
  Tensor out({T, p.heads * dv});
  for (std::size_t hd = 0; hd < p.heads; ++hd) {
    const Tensor q = matmul(x, p.wq[hd]);
    const Tensor k = matmul(x, p.wk[hd]);
    const Tensor v = matmul(x, p.wv[hd]);
    Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
    if (causal)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t tp = t + 1; tp < T; ++tp) logits[t * T + tp] = kNegInf;
    const Tensor head_out = matmul(softmax_lastdim(logits), v);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < dv; ++j) out[t * p.heads * dv + hd * dv + j] = head_out[t * dv + j];
  }
  return out;
}

Tensor aft_attention_matrices(const Tensor& q, const Tensor& k, const Tensor& w, LayerMode mode) {
  if (q.rank() != 2 || k.shape() != q.shape())
    throw DimensionError("aft_attention_matrices: Q and K must both be [T x d]");
  const std::size_t T = q.dim(0), d = q.dim(1);
  if (w.shape() != Shape{T, T}) throw DimensionError("aft_attention_matrices: w must be [T x T]");
  Tensor a({d, T, T});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t t = 0; t < T; ++t) {
      double m = kNegInf;
      for (std::size_t tp = 0; tp < T; ++tp) {
        if (mode.causal && tp > t) continue;
        m = std::max(m, k[tp * d + i] + w[t * T + tp]);
      }
      double z = 0.0;
      for (std::size_t tp = 0; tp < T; ++tp) {
        if (mode.causal && tp > t) continue;
        z += std::exp(k[tp * d + i] + w[t * T + tp] - m);
      }
      const double gate = sigmoid1(q[t * d + i]);
      for (std::size_t tp = 0; tp < T; ++tp) {
        if (mode.causal && tp > t) continue;
        a[(i * T + t) * T + tp] = gate * std::exp(k[tp * d + i] + w[t * T + tp] - m) / z;
      }
    }
  return a;
}

Tensor aft_via_attention(const Tensor& x, const AftFullParams& p, LayerMode mode, std::optional<std::size_t> window) {
  if (x.rank() != 2) throw DimensionError("aft_via_attention expects [T x d], got " + to_string(x.shape()));
  const std::size_t T = x.dim(0), d = x.dim(1);
  const Tensor q = matmul(x, p.proj.wq);
  const Tensor k = matmul(x, p.proj.wk);
  const Tensor v = matmul(x, p.proj.wv);
  const Tensor w = materialize_bias(p.bias, T, mode, window);
  const Tensor a = aft_attention_matrices(q, k, w, mode);
  Tensor pre({T, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t t = 0; t < T; ++t) {
      double acc = 0.0;
      for (std::size_t tp = 0; tp < T; ++tp) acc += a[(i * T + t) * T + tp] * v[tp * d + i];
      pre[t * d + i] = acc;
    }
  return matmul(pre, p.proj.wo);
}

Tensor aft_conv_direct(const Tensor& x, const AftConvParams& p) {
  if (x.rank() != 3 && x.rank() != 4)
    throw DimensionError("aft_conv_direct expects [H x W x d] or [B x H x W x d], got " + to_string(x.shape()));
  const std::size_t d = p.wq.dim(0), h = p.heads, s = p.kernel;
  if (s % 2 == 0) throw ConfigError("AFT-conv kernel size must be odd");
  if (h == 0 || d % h != 0) throw ConfigError("AFT-conv needs heads dividing d");
  const bool batched = x.rank() == 4;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t H = x.dim(batched ? 1 : 0), W = x.dim(batched ? 2 : 1), T = H * W, dh = d / h;
  if (x.shape().back() != d) throw DimensionError("aft_conv_direct: channel mismatch");

  const Tensor wb = reparameterize_bias(p.w_raw, p.gamma, p.beta);
  const auto half = static_cast<long>(s / 2);
  auto rel_bias = [&](std::size_t head, std::size_t t, std::size_t tp) {
    const long dr = static_cast<long>(tp / W) - static_cast<long>(t / W);
    const long dc = static_cast<long>(tp % W) - static_cast<long>(t % W);
    if (std::abs(dr) > half || std::abs(dc) > half) return 0.0;
    return wb[(head * s + static_cast<std::size_t>(dr + half)) * s + static_cast<std::size_t>(dc + half)];
  };

  Tensor y({B * T, d});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor xb = slice(x.reshape({B, T, d}), 0, b, b + 1).reshape({T, d});
    const Tensor q = matmul(xb, p.wq);
    const Tensor k = matmul(xb, p.wk);
    const Tensor v = matmul(xb, p.wv);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t head = c / dh;
        double m = kNegInf;
        for (std::size_t tp = 0; tp < T; ++tp) m = std::max(m, k[tp * h + head] + rel_bias(head, t, tp));
        double num = 0.0, den = 0.0;
        for (std::size_t tp = 0; tp < T; ++tp) {
          const double e = std::exp(k[tp * h + head] + rel_bias(head, t, tp) - m);
          num += e * v[tp * d + c];
          den += e;
        }
        y[(b * T + t) * d + c] = sigmoid1(q[t * d + c]) * num / den;
      }
  }
  return y.reshape(x.shape());
}

}  // namespace aft::oracle
