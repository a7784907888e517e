#include "aft/aft_layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "aft/errors.hpp"

namespace aft {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double sigmoid1(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------
// Input handling

struct SeqInput {
  Tensor x;  // [B*T x d]
  std::size_t batch, length, width;
  bool batched;
};

SeqInput flatten_sequence(const Tensor& x, std::size_t d, const char* op) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError(std::string(op) + ": expected [T x d] or [B x T x d], got " + to_string(x.shape()));
  const bool batched = x.rank() == 3;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t T = x.dim(x.rank() - 2);
  const std::size_t width = x.dim(x.rank() - 1);
  if (width != d)
    throw DimensionError(std::string(op) + ": input width " + std::to_string(width) +
                         " does not match projection width " + std::to_string(d));
  if (!x.all_finite()) throw NumericError(std::string(op) + ": input contains non-finite values");
  return {x.reshape({B * T, d}), B, T, d, batched};
}

Shape sequence_shape(const AftCache& c) {
  return c.batched ? Shape{c.batch, c.length, c.width} : Shape{c.length, c.width};
}

void check_projections(const Projections& p) {
  if (p.wq.rank() != 2 || p.wq.dim(0) != p.wq.dim(1))
    throw DimensionError("Wq must be square [d x d], got " + to_string(p.wq.shape()));
  const Shape sq = p.wq.shape();
  for (const Tensor* w : {&p.wk, &p.wv, &p.wo})
    if (w->shape() != sq) throw DimensionError("projection shapes disagree: " + to_string(w->shape()) + " vs " + to_string(sq));
}

void check_bias(const PositionBias& b, std::size_t T) {
  if (const auto* dense = std::get_if<DenseBias>(&b.param)) {
    // a larger bias serves shorter sequences through its top-left block
    if (dense->w.rank() != 2 || dense->w.dim(0) != dense->w.dim(1) || dense->w.dim(0) < T)
      throw DimensionError("dense position bias has shape " + to_string(dense->w.shape()) +
                           " but sequence length is " + std::to_string(T));
  } else {
    const auto& f = std::get<FactorizedBias>(b.param);
    if (f.u.rank() != 2 || f.v.shape() != f.u.shape())
      throw DimensionError("factorized bias u/v shapes disagree: " + to_string(f.u.shape()) + " vs " +
                           to_string(f.v.shape()));
    if (f.u.dim(0) < T)
      throw DimensionError("factorized bias has " + std::to_string(f.u.dim(0)) + " rows, sequence length is " +
                           std::to_string(T));
  }
}

struct Qkv {
  Tensor q, k, v;
};

Qkv project(const Tensor& x2, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  return {matmul(x2, wq), matmul(x2, wk), matmul(x2, wv)};
}

Tensor restore_shape(Tensor y2, const SeqInput& in) {
  y2.reshape_inplace(in.batched ? Shape{in.batch, in.length, in.width} : Shape{in.length, in.width});
  return y2;
}

void fill_cache_header(AftCache& c, Variant v, LayerMode mode, std::size_t window, const SeqInput& in,
                       std::uint64_t fp) {
  c.variant = v;
  c.mode = mode;
  c.window = window;
  c.batch = in.batch;
  c.length = in.length;
  c.width = in.width;
  c.batched = in.batched;
  c.fingerprint = fp;
}

void check_cache(const AftCache& c, Variant expected, std::uint64_t fp, const Tensor& dy, const Shape& out_shape) {
  if (c.x.empty()) throw UsageError("backward called with an empty cache (forward ran without keep_cache)");
  if (c.variant != expected)
    throw UsageError("cache was produced by the " + std::string(to_string(c.variant)) + " variant, not " +
                     std::string(to_string(expected)));
  if (c.fingerprint != fp) throw UsageError("stale cache: parameters changed since the forward pass");
  if (dy.shape() != out_shape)
    throw DimensionError("dy shape " + to_string(dy.shape()) + " does not match forward output " + to_string(out_shape));
}

// dX and projection gradients from dQ, dK, dV (all [B*T x .]).
void project_backward(const Tensor& x2, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& dq,
                      const Tensor& dk, const Tensor& dv, Tensor& dx, Tensor& dwq, Tensor& dwk, Tensor& dwv) {
  const Tensor xt = transpose(x2);
  dwq = matmul(xt, dq);
  dwk = matmul(xt, dk);
  dwv = matmul(xt, dv);
  dx = matmul(dq, transpose(wq));
  dx.add_inplace(matmul(dk, transpose(wk)));
  dx.add_inplace(matmul(dv, transpose(wv)));
}

// Shared gate step: from dY (pre-Wo) computes dQ and dA given cached q, avg.
void gate_backward(const Tensor& q, const Tensor& avg, const Tensor& dgated, Tensor& dq, Tensor& davg) {
  dq = Tensor::zeros_like(q);
  davg = Tensor::zeros_like(q);
  for (std::size_t n = 0; n < q.numel(); ++n) {
    const double s = sigmoid1(q[n]);
    davg[n] = dgated[n] * s;
    dq[n] = dgated[n] * avg[n] * s * (1.0 - s);
  }
}

std::uint64_t fnv(std::uint64_t h, const Tensor& t) noexcept {
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
  const std::size_t n = t.numel() * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ULL;
  }
  // shape participates so that reshaped parameters do not collide
  for (auto e : t.shape()) {
    h ^= e;
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvBasis = 0xCBF29CE484222325ULL;

std::uint64_t fingerprint(const PositionBias& b) noexcept {
  if (const auto* d = std::get_if<DenseBias>(&b.param)) return fnv(kFnvBasis, d->w);
  const auto& f = std::get<FactorizedBias>(b.param);
  return fnv(fnv(kFnvBasis ^ 1, f.u), f.v);
}

void accumulate_bias_row(PositionBias& dbias, const PositionBias& bias, std::size_t t, std::size_t begin,
                         std::size_t end, const double* dwrow) {
  if (auto* d = std::get_if<DenseBias>(&dbias.param)) {
    double* row = d->w.ptr() + t * d->w.dim(1);
    for (std::size_t j = begin; j < end; ++j) row[j] += dwrow[j - begin];
    return;
  }
  auto& df = std::get<FactorizedBias>(dbias.param);
  const auto& f = std::get<FactorizedBias>(bias.param);
  const std::size_t r = f.u.dim(1);
  const double* ut = f.u.ptr() + t * r;
  double* dut = df.u.ptr() + t * r;
  for (std::size_t j = begin; j < end; ++j) {
    const double g = dwrow[j - begin];
    if (g == 0.0) continue;
    const double* vj = f.v.ptr() + j * r;
    double* dvj = df.v.ptr() + j * r;
    for (std::size_t a = 0; a < r; ++a) {
      dut[a] += g * vj[a];
      dvj[a] += g * ut[a];
    }
  }
}

// Local window bounds for query t. In-window context is [lo, hi); the
// out-of-window prefix is [0, lo) and the suffix [hi, T) (non-causal only).
struct Window {
  std::size_t lo, hi;
};

Window window_bounds(std::size_t t, std::size_t s, std::size_t T, bool causal) {
  if (s == 0) return {t + 1, t + 1};
  const std::size_t lo = t + 1 >= s ? t + 1 - s : 0;
  const std::size_t hi = causal ? t + 1 : std::min(T, t + s);
  return {lo, hi};
}

// Running max of K and rescaled exponential sums over prefixes (and suffixes).
// pre_max[j] = max_{t' <= j} K[t'], pre_num[j] = sum_{t' <= j} exp(K[t'] - pre_max[j]) V[t'].
struct RunningSums {
  Buffer pre_max, pre_num, pre_den;
  Buffer suf_max, suf_num, suf_den;
};

RunningSums running_sums(const double* K, const double* V, std::size_t T, std::size_t d, bool prefix,
                         bool suffix) {
  RunningSums r;
  if (prefix) {
    r.pre_max.resize(T * d);
    r.pre_num.resize(T * d);
    r.pre_den.resize(T * d);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < d; ++i) {
        const std::size_t n = t * d + i;
        if (t == 0) {
          r.pre_max[n] = K[n];
          r.pre_num[n] = V[n];
          r.pre_den[n] = 1.0;
          continue;
        }
        const std::size_t p = n - d;
        const double m = std::max(r.pre_max[p], K[n]);
        const double f = std::exp(r.pre_max[p] - m);
        const double e = std::exp(K[n] - m);
        r.pre_max[n] = m;
        r.pre_num[n] = r.pre_num[p] * f + e * V[n];
        r.pre_den[n] = r.pre_den[p] * f + e;
      }
  }
  if (suffix) {
    r.suf_max.resize(T * d);
    r.suf_num.resize(T * d);
    r.suf_den.resize(T * d);
    for (std::size_t t = T; t-- > 0;)
      for (std::size_t i = 0; i < d; ++i) {
        const std::size_t n = t * d + i;
        if (t == T - 1) {
          r.suf_max[n] = K[n];
          r.suf_num[n] = V[n];
          r.suf_den[n] = 1.0;
          continue;
        }
        const std::size_t p = n + d;
        const double m = std::max(r.suf_max[p], K[n]);
        const double f = std::exp(r.suf_max[p] - m);
        const double e = std::exp(K[n] - m);
        r.suf_max[n] = m;
        r.suf_num[n] = r.suf_num[p] * f + e * V[n];
        r.suf_den[n] = r.suf_den[p] * f + e;
      }
  }
  return r;
}

// Applies Wo to the gated values and finalizes the forward result.
AftForward finish_projected(Tensor gated, const Tensor& wo, const SeqInput& in, Qkv qkv, Tensor avg, Tensor shift,
                            Tensor denom, bool keep_cache, Variant variant, LayerMode mode, std::size_t window,
                            std::uint64_t fp) {
  AftForward out;
  out.y = restore_shape(matmul(gated, wo), in);
  if (keep_cache) {
    auto& c = out.cache;
    fill_cache_header(c, variant, mode, window, in, fp);
    c.x = in.x;
    c.q = std::move(qkv.q);
    c.k = std::move(qkv.k);
    c.v = std::move(qkv.v);
    c.avg = std::move(avg);
    c.shift = std::move(shift);
    c.denom = std::move(denom);
    c.gated = std::move(gated);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Types

std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::Local: return "local";
    case Variant::Simple: return "simple";
    case Variant::Conv: return "conv";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::Full;
  if (name == "local") return Variant::Local;
  if (name == "simple") return Variant::Simple;
  if (name == "conv") return Variant::Conv;
  throw ConfigError("unknown AFT variant '" + std::string(name) + "' (expected full|local|simple|conv)");
}

PositionBias PositionBias::dense(Tensor w) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1))
    throw DimensionError("dense position bias must be square, got " + to_string(w.shape()));
  return PositionBias{DenseBias{std::move(w)}};
}

PositionBias PositionBias::factorized(Tensor u, Tensor v) {
  if (u.rank() != 2 || u.shape() != v.shape())
    throw DimensionError("factorized bias needs u, v of equal shape [T x d'], got " + to_string(u.shape()) + " and " +
                         to_string(v.shape()));
  return PositionBias{FactorizedBias{std::move(u), std::move(v)}};
}

std::size_t PositionBias::rows() const noexcept {
  if (const auto* d = std::get_if<DenseBias>(&param)) return d->w.empty() ? 0 : d->w.dim(0);
  const auto& f = std::get<FactorizedBias>(param);
  return f.u.empty() ? 0 : f.u.dim(0);
}

std::size_t PositionBias::parameter_count() const noexcept {
  if (const auto* d = std::get_if<DenseBias>(&param)) return d->w.numel();
  const auto& f = std::get<FactorizedBias>(param);
  return f.u.numel() + f.v.numel();
}

void PositionBias::row(std::size_t t, std::size_t begin, std::size_t end, double* out) const {
  if (const auto* d = std::get_if<DenseBias>(&param)) {
    const double* src = d->w.ptr() + t * d->w.dim(1);
    std::copy(src + begin, src + end, out);
    return;
  }
  const auto& f = std::get<FactorizedBias>(param);
  const std::size_t r = f.u.dim(1);
  const double* ut = f.u.ptr() + t * r;
  for (std::size_t j = begin; j < end; ++j) {
    const double* vj = f.v.ptr() + j * r;
    double acc = 0.0;
    for (std::size_t a = 0; a < r; ++a) acc += ut[a] * vj[a];
    out[j - begin] = acc;
  }
}

PositionBias PositionBias::zeros_like() const {
  if (const auto* d = std::get_if<DenseBias>(&param)) return PositionBias{DenseBias{Tensor::zeros_like(d->w)}};
  const auto& f = std::get<FactorizedBias>(param);
  return PositionBias{FactorizedBias{Tensor::zeros_like(f.u), Tensor::zeros_like(f.v)}};
}

Projections Projections::zeros_like() const {
  return {Tensor::zeros_like(wq), Tensor::zeros_like(wk), Tensor::zeros_like(wv), Tensor::zeros_like(wo)};
}

AftConvParams AftConvParams::zeros_like() const {
  AftConvParams z;
  z.heads = heads;
  z.kernel = kernel;
  z.wq = Tensor::zeros_like(wq);
  z.wk = Tensor::zeros_like(wk);
  z.wv = Tensor::zeros_like(wv);
  z.w_raw = Tensor::zeros_like(w_raw);
  z.gamma = Tensor::zeros_like(gamma);
  z.beta = Tensor::zeros_like(beta);
  return z;
}

Projections init_projections(Rng& rng, std::size_t d, double stddev) {
  Projections p;
  p.wq = randn(rng, {d, d}, 0.0, stddev);
  p.wk = randn(rng, {d, d}, 0.0, stddev);
  p.wv = randn(rng, {d, d}, 0.0, stddev);
  p.wo = randn(rng, {d, d}, 0.0, stddev);
  return p;
}

PositionBias init_dense_bias(Rng& rng, std::size_t T, double stddev) {
  return PositionBias::dense(randn(rng, {T, T}, 0.0, stddev));
}

PositionBias init_factorized_bias(Rng& rng, std::size_t T, std::size_t rank, double stddev) {
  Tensor u = randn(rng, {T, rank}, 0.0, stddev);
  Tensor v = randn(rng, {T, rank}, 0.0, stddev);
  return PositionBias::factorized(std::move(u), std::move(v));
}

AftConvParams init_conv_params(Rng& rng, std::size_t d, std::size_t heads, std::size_t kernel, double proj_stddev,
                               double bias_stddev) {
  if (heads == 0 || d % heads != 0)
    throw ConfigError("AFT-conv needs heads dividing d (d=" + std::to_string(d) + ", h=" + std::to_string(heads) + ")");
  if (kernel % 2 == 0) throw ConfigError("AFT-conv kernel size must be odd, got " + std::to_string(kernel));
  AftConvParams p;
  p.heads = heads;
  p.kernel = kernel;
  p.wq = randn(rng, {d, d}, 0.0, proj_stddev);
  p.wk = randn(rng, {d, heads}, 0.0, proj_stddev);
  p.wv = randn(rng, {d, d}, 0.0, proj_stddev);
  p.w_raw = randn(rng, {heads, kernel, kernel}, 0.0, bias_stddev);
  p.gamma = Tensor({heads}, 0.0);
  p.beta = Tensor({heads}, 0.0);
  return p;
}

std::uint64_t fingerprint(const Projections& p) noexcept {
  std::uint64_t h = kFnvBasis;
  for (const Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo}) h = fnv(h, *t);
  return h;
}

std::uint64_t fingerprint(const AftFullParams& p) noexcept {
  return fingerprint(p.proj) ^ Rng::mix(fingerprint(p.bias));
}

std::uint64_t fingerprint(const AftConvParams& p) noexcept {
  std::uint64_t h = kFnvBasis ^ (p.heads * 131 + p.kernel);
  for (const Tensor* t : {&p.wq, &p.wk, &p.wv, &p.w_raw, &p.gamma, &p.beta}) h = fnv(h, *t);
  return h;
}

// ---------------------------------------------------------------------------
// Bias helpers

Tensor materialize_bias(const PositionBias& b, std::size_t T, LayerMode mode, std::optional<std::size_t> window) {
  if (b.rows() < T)
    throw DimensionError("position bias has " + std::to_string(b.rows()) + " rows, need " + std::to_string(T));
  if (window && *window > T)
    throw ConfigError("local window " + std::to_string(*window) + " exceeds sequence length " + std::to_string(T));
  Tensor w({T, T});
  for (std::size_t t = 0; t < T; ++t) {
    double* row = w.ptr() + t * T;
    b.row(t, 0, T, row);
    for (std::size_t tp = 0; tp < T; ++tp) {
      const std::size_t dist = t > tp ? t - tp : tp - t;
      if (window && dist >= *window) row[tp] = mode.hard_window ? kNegInf : 0.0;
      if (mode.causal && tp > t) row[tp] = kNegInf;
    }
  }
  return w;
}

Tensor reparameterize_bias(const Tensor& w_raw, const Tensor& gamma, const Tensor& beta) {
  if (w_raw.rank() != 3) throw DimensionError("w_raw must be [h x s x s], got " + to_string(w_raw.shape()));
  const std::size_t h = w_raw.dim(0);
  if (gamma.shape() != Shape{h} || beta.shape() != Shape{h})
    throw DimensionError("gamma/beta must have shape [" + std::to_string(h) + "]");
  const std::size_t n = w_raw.dim(1) * w_raw.dim(2);
  Tensor out(w_raw.shape());
  for (std::size_t i = 0; i < h; ++i) {
    const double* w = w_raw.ptr() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += w[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (w[j] - mean) * (w[j] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    double* o = out.ptr() + i * n;
    for (std::size_t j = 0; j < n; ++j) o[j] = gamma[i] * (w[j] - mean) / (sd + kReparamEpsilon) + beta[i];
  }
  return out;
}

ReparamGrads reparameterize_bias_backward(const Tensor& w_raw, const Tensor& gamma, const Tensor& dw) {
  if (dw.shape() != w_raw.shape()) throw DimensionError("reparameterize_bias_backward: dw shape mismatch");
  const std::size_t h = w_raw.dim(0);
  const std::size_t n = w_raw.dim(1) * w_raw.dim(2);
  const double nd = static_cast<double>(n);
  ReparamGrads g{Tensor(w_raw.shape()), Tensor({h}), Tensor({h})};
  for (std::size_t i = 0; i < h; ++i) {
    const double* w = w_raw.ptr() + i * n;
    const double* gw = dw.ptr() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += w[j];
    mean /= nd;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (w[j] - mean) * (w[j] - mean);
    const double sd = std::sqrt(var / nd);
    const double denom = sd + kReparamEpsilon;

    double sum_g = 0.0, sum_gc = 0.0, dgamma = 0.0, dbeta = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double centered = w[j] - mean;
      dbeta += gw[j];
      dgamma += gw[j] * centered / denom;
      sum_g += gamma[i] * gw[j];
      sum_gc += gamma[i] * gw[j] * centered;
    }
    g.dgamma[i] = dgamma;
    g.dbeta[i] = dbeta;
    // d std / d w_j = (w_j - mean) / (n std); taken as 0 at std == 0.
    const double dsd = -sum_gc / (denom * denom);
    double* out = g.dw_raw.ptr() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double centered = w[j] - mean;
      double v = (gamma[i] * gw[j] - sum_g / nd) / denom;
      if (sd > 0.0) v += dsd * centered / (nd * sd);
      out[j] = v;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// AFT-full

AftForward aft_full_forward(const Tensor& x, const AftFullParams& p, LayerMode mode, bool keep_cache) {
  check_projections(p.proj);
  const SeqInput in = flatten_sequence(x, p.proj.width(), "aft_full_forward");
  const std::size_t T = in.length, d = in.width;
  check_bias(p.bias, T);
  Qkv qkv = project(in.x, p.proj.wq, p.proj.wk, p.proj.wv);

  const std::size_t rows = in.batch * T;
  Tensor gated({rows, d});
  Tensor avg, shift, denom;
  if (keep_cache) {
    avg = Tensor({rows, d});
    shift = Tensor({rows, d});
    denom = Tensor({rows, d});
  }
  Buffer wrow(T), m(d), num(d), den(d);
  for (std::size_t b = 0; b < in.batch; ++b) {
    const double* K = qkv.k.ptr() + b * T * d;
    const double* V = qkv.v.ptr() + b * T * d;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t end = mode.causal ? t + 1 : T;
      p.bias.row(t, 0, end, wrow.data());
      std::fill(m.begin(), m.end(), kNegInf);
      for (std::size_t tp = 0; tp < end; ++tp) {
        const double* kr = K + tp * d;
        const double w = wrow[tp];
        for (std::size_t i = 0; i < d; ++i) m[i] = std::max(m[i], kr[i] + w);
      }
      std::fill(num.begin(), num.end(), 0.0);
      std::fill(den.begin(), den.end(), 0.0);
      for (std::size_t tp = 0; tp < end; ++tp) {
        const double* kr = K + tp * d;
        const double* vr = V + tp * d;
        const double w = wrow[tp];
        for (std::size_t i = 0; i < d; ++i) {
          const double e = std::exp(kr[i] + w - m[i]);
          num[i] += e * vr[i];
          den[i] += e;
        }
      }
      const std::size_t row = b * T + t;
      const double* qr = qkv.q.ptr() + row * d;
      double* g = gated.ptr() + row * d;
      for (std::size_t i = 0; i < d; ++i) {
        const double a = num[i] / den[i];
        g[i] = sigmoid1(qr[i]) * a;
        if (keep_cache) {
          avg[row * d + i] = a;
          shift[row * d + i] = m[i];
          denom[row * d + i] = den[i];
        }
      }
    }
  }
  const std::uint64_t fp = keep_cache ? fingerprint(p) : 0;
  return finish_projected(std::move(gated), p.proj.wo, in, std::move(qkv), std::move(avg), std::move(shift),
                          std::move(denom), keep_cache, Variant::Full, mode, T, fp);
}

AftFullGrads aft_full_backward(const AftCache& c, const AftFullParams& p, const Tensor& dy) {
  check_cache(c, Variant::Full, fingerprint(p), dy, sequence_shape(c));
  const std::size_t T = c.length, d = c.width, rows = c.batch * T;
  AftFullGrads g;
  const Tensor dy2 = dy.reshape({rows, d});
  g.proj.dwo = matmul(transpose(c.gated), dy2);
  const Tensor dgated = matmul(dy2, transpose(p.proj.wo));
  Tensor dq, davg;
  gate_backward(c.q, c.avg, dgated, dq, davg);

  Tensor dk({rows, d}), dv({rows, d});
  g.dbias = p.bias.zeros_like();
  Buffer wrow(T), dwrow(T);
  for (std::size_t b = 0; b < c.batch; ++b) {
    const double* K = c.k.ptr() + b * T * d;
    const double* V = c.v.ptr() + b * T * d;
    double* dK = dk.ptr() + b * T * d;
    double* dV = dv.ptr() + b * T * d;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t end = c.mode.causal ? t + 1 : T;
      const std::size_t row = b * T + t;
      const double* m = c.shift.ptr() + row * d;
      const double* den = c.denom.ptr() + row * d;
      const double* A = c.avg.ptr() + row * d;
      const double* dA = davg.ptr() + row * d;
      p.bias.row(t, 0, end, wrow.data());
      for (std::size_t tp = 0; tp < end; ++tp) {
        const double* kr = K + tp * d;
        const double* vr = V + tp * d;
        double* dkr = dK + tp * d;
        double* dvr = dV + tp * d;
        const double w = wrow[tp];
        double dw = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double pw = std::exp(kr[i] + w - m[i]) / den[i];
          const double gp = dA[i] * pw;
          dvr[i] += gp;
          const double dz = gp * (vr[i] - A[i]);
          dkr[i] += dz;
          dw += dz;
        }
        dwrow[tp] = dw;
      }
      accumulate_bias_row(g.dbias, p.bias, t, 0, end, dwrow.data());
    }
  }
  project_backward(c.x, p.proj.wq, p.proj.wk, p.proj.wv, dq, dk, dv, g.dx, g.proj.dwq, g.proj.dwk, g.proj.dwv);
  g.dx.reshape_inplace(sequence_shape(c));
  return g;
}

// ---------------------------------------------------------------------------
// AFT-local

AftForward aft_local_forward(const Tensor& x, const AftFullParams& p, std::size_t s, LayerMode mode,
                             bool keep_cache) {
  check_projections(p.proj);
  const SeqInput in = flatten_sequence(x, p.proj.width(), "aft_local_forward");
  const std::size_t T = in.length, d = in.width;
  if (s > T)
    throw ConfigError("local window " + std::to_string(s) + " exceeds sequence length " + std::to_string(T));
  if (s == 0 && mode.hard_window) throw ConfigError("hard_window with window 0 leaves an empty context");
  check_bias(p.bias, T);
  Qkv qkv = project(in.x, p.proj.wq, p.proj.wk, p.proj.wv);

  const bool use_prefix = !mode.hard_window;
  const bool use_suffix = !mode.hard_window && !mode.causal;
  const std::size_t rows = in.batch * T;
  Tensor gated({rows, d});
  Tensor avg, shift, denom;
  if (keep_cache) {
    avg = Tensor({rows, d});
    shift = Tensor({rows, d});
    denom = Tensor({rows, d});
  }
  Buffer wrow(std::max<std::size_t>(2 * s, 1)), c(d), num(d), den(d);
  for (std::size_t b = 0; b < in.batch; ++b) {
    const double* K = qkv.k.ptr() + b * T * d;
    const double* V = qkv.v.ptr() + b * T * d;
    const RunningSums rs = running_sums(K, V, T, d, use_prefix, use_suffix);
    for (std::size_t t = 0; t < T; ++t) {
      const Window win = window_bounds(t, s, T, mode.causal);
      const bool has_prefix = use_prefix && win.lo > 0;
      const bool has_suffix = use_suffix && win.hi < T;
      if (win.hi > win.lo) p.bias.row(t, win.lo, win.hi, wrow.data());

      std::fill(c.begin(), c.end(), kNegInf);
      for (std::size_t tp = win.lo; tp < win.hi; ++tp) {
        const double* kr = K + tp * d;
        const double w = wrow[tp - win.lo];
        for (std::size_t i = 0; i < d; ++i) c[i] = std::max(c[i], kr[i] + w);
      }
      if (has_prefix)
        for (std::size_t i = 0; i < d; ++i) c[i] = std::max(c[i], rs.pre_max[(win.lo - 1) * d + i]);
      if (has_suffix)
        for (std::size_t i = 0; i < d; ++i) c[i] = std::max(c[i], rs.suf_max[win.hi * d + i]);

      std::fill(num.begin(), num.end(), 0.0);
      std::fill(den.begin(), den.end(), 0.0);
      for (std::size_t tp = win.lo; tp < win.hi; ++tp) {
        const double* kr = K + tp * d;
        const double* vr = V + tp * d;
        const double w = wrow[tp - win.lo];
        for (std::size_t i = 0; i < d; ++i) {
          const double e = std::exp(kr[i] + w - c[i]);
          num[i] += e * vr[i];
          den[i] += e;
        }
      }
      if (has_prefix) {
        const std::size_t n0 = (win.lo - 1) * d;
        for (std::size_t i = 0; i < d; ++i) {
          const double f = std::exp(rs.pre_max[n0 + i] - c[i]);
          num[i] += f * rs.pre_num[n0 + i];
          den[i] += f * rs.pre_den[n0 + i];
        }
      }
      if (has_suffix) {
        const std::size_t n0 = win.hi * d;
        for (std::size_t i = 0; i < d; ++i) {
          const double f = std::exp(rs.suf_max[n0 + i] - c[i]);
          num[i] += f * rs.suf_num[n0 + i];
          den[i] += f * rs.suf_den[n0 + i];
        }
      }
      const std::size_t row = b * T + t;
      const double* qr = qkv.q.ptr() + row * d;
      double* g = gated.ptr() + row * d;
      for (std::size_t i = 0; i < d; ++i) {
        const double a = num[i] / den[i];
        g[i] = sigmoid1(qr[i]) * a;
        if (keep_cache) {
          avg[row * d + i] = a;
          shift[row * d + i] = c[i];
          denom[row * d + i] = den[i];
        }
      }
    }
  }
  const std::uint64_t fp = keep_cache ? fingerprint(p) : 0;
  return finish_projected(std::move(gated), p.proj.wo, in, std::move(qkv), std::move(avg), std::move(shift),
                          std::move(denom), keep_cache, Variant::Local, mode, s, fp);
}

AftFullGrads aft_local_backward(const AftCache& cache, const AftFullParams& p, const Tensor& dy) {
  check_cache(cache, Variant::Local, fingerprint(p), dy, sequence_shape(cache));
  const std::size_t T = cache.length, d = cache.width, rows = cache.batch * T, s = cache.window;
  const LayerMode mode = cache.mode;
  AftFullGrads g;
  const Tensor dy2 = dy.reshape({rows, d});
  g.proj.dwo = matmul(transpose(cache.gated), dy2);
  const Tensor dgated = matmul(dy2, transpose(p.proj.wo));
  Tensor dq, davg;
  gate_backward(cache.q, cache.avg, dgated, dq, davg);

  Tensor dk({rows, d}), dv({rows, d});
  g.dbias = p.bias.zeros_like();
  const bool use_prefix = !mode.hard_window;
  const bool use_suffix = !mode.hard_window && !mode.causal;
  Buffer wrow(std::max<std::size_t>(2 * s, 1)), dwrow(std::max<std::size_t>(2 * s, 1));
  Buffer g1(T * d), g2(T * d), carry1(d), carry2(d);

  for (std::size_t b = 0; b < cache.batch; ++b) {
    const std::size_t base = b * T * d;
    const double* K = cache.k.ptr() + base;
    const double* V = cache.v.ptr() + base;
    const double* C = cache.shift.ptr() + base;
    const double* D = cache.denom.ptr() + base;
    const double* A = cache.avg.ptr() + base;
    const double* dA = davg.ptr() + base;
    double* dK = dk.ptr() + base;
    double* dV = dv.ptr() + base;

    // In-window pairs: explicit weights.
    for (std::size_t t = 0; t < T; ++t) {
      const Window win = window_bounds(t, s, T, mode.causal);
      if (win.hi <= win.lo) continue;
      p.bias.row(t, win.lo, win.hi, wrow.data());
      for (std::size_t tp = win.lo; tp < win.hi; ++tp) {
        const double w = wrow[tp - win.lo];
        double dw = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t nt = t * d + i, np = tp * d + i;
          const double gp = dA[nt] * std::exp(K[np] + w - C[nt]) / D[nt];
          dV[np] += gp;
          const double dz = gp * (V[np] - A[nt]);
          dK[np] += dz;
          dw += dz;
        }
        dwrow[tp - win.lo] = dw;
      }
      accumulate_bias_row(g.dbias, p.bias, t, win.lo, win.hi, dwrow.data());
    }
    if (!use_prefix) continue;

    // Out-of-window pairs share exp(K[t'] - shift[t]) / denom[t] weights; they
    // are accumulated with rescaled running sums over t.
    for (std::size_t n = 0; n < T * d; ++n) {
      g1[n] = dA[n] / D[n];
      g2[n] = g1[n] * A[n];
    }
    const RunningSums rs = running_sums(K, V, T, d, true, use_suffix);

    // Prefix part: pairs with t >= t' + s.
    std::fill(carry1.begin(), carry1.end(), 0.0);
    std::fill(carry2.begin(), carry2.end(), 0.0);
    for (std::size_t tp = T; tp-- > 0;) {
      for (std::size_t i = 0; i < d; ++i) {
        const std::size_t np = tp * d + i;
        const double pm = rs.pre_max[np];
        double u1 = 0.0, u2 = 0.0;
        if (tp + 1 < T) {
          const double f = std::exp(pm - rs.pre_max[np + d]);
          u1 = f * carry1[i];
          u2 = f * carry2[i];
        }
        if (tp + s < T) {
          const std::size_t nt = (tp + s) * d + i;
          const double e = std::exp(pm - C[nt]);
          u1 += g1[nt] * e;
          u2 += g2[nt] * e;
        }
        carry1[i] = u1;
        carry2[i] = u2;
        const double ek = std::exp(K[np] - pm);
        dV[np] += ek * u1;
        dK[np] += ek * (V[np] * u1 - u2);
      }
    }
    if (!use_suffix) continue;

    // Suffix part: pairs with t' >= t + max(s, 1).
    const std::size_t s2 = std::max<std::size_t>(s, 1);
    std::fill(carry1.begin(), carry1.end(), 0.0);
    std::fill(carry2.begin(), carry2.end(), 0.0);
    for (std::size_t tp = 0; tp < T; ++tp) {
      for (std::size_t i = 0; i < d; ++i) {
        const std::size_t np = tp * d + i;
        const double sm = rs.suf_max[np];
        double l1 = 0.0, l2 = 0.0;
        if (tp >= 1) {
          const double f = std::exp(sm - rs.suf_max[np - d]);
          l1 = f * carry1[i];
          l2 = f * carry2[i];
        }
        if (tp >= s2) {
          const std::size_t nt = (tp - s2) * d + i;
          const double e = std::exp(sm - C[nt]);
          l1 += g1[nt] * e;
          l2 += g2[nt] * e;
        }
        carry1[i] = l1;
        carry2[i] = l2;
        const double ek = std::exp(K[np] - sm);
        dV[np] += ek * l1;
        dK[np] += ek * (V[np] * l1 - l2);
      }
    }
  }
  project_backward(cache.x, p.proj.wq, p.proj.wk, p.proj.wv, dq, dk, dv, g.dx, g.proj.dwq, g.proj.dwk, g.proj.dwv);
  g.dx.reshape_inplace(sequence_shape(cache));
  return g;
}

// ---------------------------------------------------------------------------
// AFT-simple

AftForward aft_simple_forward(const Tensor& x, const Projections& p, LayerMode mode, bool keep_cache) {
  check_projections(p);
  const SeqInput in = flatten_sequence(x, p.width(), "aft_simple_forward");
  const std::size_t T = in.length, d = in.width, rows = in.batch * T;
  Qkv qkv = project(in.x, p.wq, p.wk, p.wv);

  Tensor gated({rows, d});
  Tensor avg, shift, denom;
  if (keep_cache) {
    avg = Tensor({rows, d});
    shift = Tensor({rows, d});
    denom = Tensor({rows, d});
  }
  Buffer m(d), num(d), den(d);
  for (std::size_t b = 0; b < in.batch; ++b) {
    const double* K = qkv.k.ptr() + b * T * d;
    const double* V = qkv.v.ptr() + b * T * d;
    const double* Q = qkv.q.ptr() + b * T * d;
    double* G = gated.ptr() + b * T * d;
    auto emit = [&](std::size_t t) {
      const std::size_t row = b * T + t;
      for (std::size_t i = 0; i < d; ++i) {
        const double a = num[i] / den[i];
        G[t * d + i] = sigmoid1(Q[t * d + i]) * a;
        if (keep_cache) {
          avg[row * d + i] = a;
          shift[row * d + i] = m[i];
          denom[row * d + i] = den[i];
        }
      }
    };
    if (mode.causal) {
      // Running prefix sums rescaled to the running max.
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < d; ++i) {
          const double kv = K[t * d + i];
          if (t == 0) {
            m[i] = kv;
            num[i] = V[i];
            den[i] = 1.0;
            continue;
          }
          const double nm = std::max(m[i], kv);
          const double f = std::exp(m[i] - nm);
          const double e = std::exp(kv - nm);
          num[i] = num[i] * f + e * V[t * d + i];
          den[i] = den[i] * f + e;
          m[i] = nm;
        }
        emit(t);
      }
    } else {
      std::fill(m.begin(), m.end(), kNegInf);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) m[i] = std::max(m[i], K[t * d + i]);
      std::fill(num.begin(), num.end(), 0.0);
      std::fill(den.begin(), den.end(), 0.0);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) {
          const double e = std::exp(K[t * d + i] - m[i]);
          num[i] += e * V[t * d + i];
          den[i] += e;
        }
      for (std::size_t t = 0; t < T; ++t) emit(t);
    }
  }
  const std::uint64_t fp = keep_cache ? fingerprint(p) : 0;
  return finish_projected(std::move(gated), p.wo, in, std::move(qkv), std::move(avg), std::move(shift),
                          std::move(denom), keep_cache, Variant::Simple, mode, 0, fp);
}

AftSimpleGrads aft_simple_backward(const AftCache& c, const Projections& p, const Tensor& dy) {
  check_cache(c, Variant::Simple, fingerprint(p), dy, sequence_shape(c));
  const std::size_t T = c.length, d = c.width, rows = c.batch * T;
  AftSimpleGrads g;
  const Tensor dy2 = dy.reshape({rows, d});
  g.proj.dwo = matmul(transpose(c.gated), dy2);
  const Tensor dgated = matmul(dy2, transpose(p.wo));
  Tensor dq, davg;
  gate_backward(c.q, c.avg, dgated, dq, davg);

  Tensor dk({rows, d}), dv({rows, d});
  Buffer s1(d), s2(d);
  for (std::size_t b = 0; b < c.batch; ++b) {
    const std::size_t base = b * T * d;
    const double* K = c.k.ptr() + base;
    const double* V = c.v.ptr() + base;
    const double* C = c.shift.ptr() + base;
    const double* D = c.denom.ptr() + base;
    const double* A = c.avg.ptr() + base;
    const double* dA = davg.ptr() + base;
    double* dK = dk.ptr() + base;
    double* dV = dv.ptr() + base;
    if (c.mode.causal) {
      // s1[t'] = sum_{t >= t'} dA[t] / D[t] * exp(C[t'] - C[t]); s2 adds a factor A[t].
      std::fill(s1.begin(), s1.end(), 0.0);
      std::fill(s2.begin(), s2.end(), 0.0);
      for (std::size_t tp = T; tp-- > 0;)
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t n = tp * d + i;
          if (tp + 1 < T) {
            const double f = std::exp(C[n] - C[n + d]);
            s1[i] *= f;
            s2[i] *= f;
          }
          const double gt = dA[n] / D[n];
          s1[i] += gt;
          s2[i] += gt * A[n];
          const double e = std::exp(K[n] - C[n]);
          dV[n] = e * s1[i];
          dK[n] = e * (V[n] * s1[i] - s2[i]);
        }
    } else {
      std::fill(s1.begin(), s1.end(), 0.0);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) s1[i] += dA[t * d + i];
      for (std::size_t tp = 0; tp < T; ++tp)
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t n = tp * d + i;
          const double pw = std::exp(K[n] - C[n]) / D[n];
          dV[n] = pw * s1[i];
          dK[n] = pw * (V[n] - A[n]) * s1[i];
        }
    }
  }
  project_backward(c.x, p.wq, p.wk, p.wv, dq, dk, dv, g.dx, g.proj.dwq, g.proj.dwk, g.proj.dwv);
  g.dx.reshape_inplace(sequence_shape(c));
  return g;
}

// ---------------------------------------------------------------------------
// AFT-conv

namespace {

struct GridInput {
  Tensor x;  // [B*H*W x d]
  std::size_t batch, h, w, d;
  bool batched;
};

GridInput flatten_grid(const Tensor& x, std::size_t d) {
  if (x.rank() != 3 && x.rank() != 4)
    throw DimensionError("aft_conv_forward: expected [H x W x d] or [B x H x W x d], got " + to_string(x.shape()));
  const bool batched = x.rank() == 4;
  const std::size_t off = batched ? 1 : 0;
  GridInput g{Tensor(), batched ? x.dim(0) : 1, x.dim(off), x.dim(off + 1), x.dim(off + 2), batched};
  if (g.d != d)
    throw DimensionError("aft_conv_forward: input channels " + std::to_string(g.d) + " do not match width " +
                         std::to_string(d));
  if (!x.all_finite()) throw NumericError("aft_conv_forward: input contains non-finite values");
  g.x = x.reshape({g.batch * g.h * g.w, d});
  return g;
}

void check_conv_params(const AftConvParams& p) {
  const std::size_t d = p.wq.dim(0), h = p.heads, s = p.kernel;
  if (s % 2 == 0) throw ConfigError("AFT-conv kernel size must be odd, got " + std::to_string(s));
  if (h == 0 || d % h != 0)
    throw ConfigError("AFT-conv needs heads dividing d (d=" + std::to_string(d) + ", h=" + std::to_string(h) + ")");
  if (p.wq.shape() != Shape{d, d} || p.wv.shape() != Shape{d, d} || p.wk.shape() != Shape{d, h})
    throw DimensionError("AFT-conv projections must be Wq, Wv [d x d] and Wk [d x h]");
  if (p.w_raw.shape() != Shape{h, s, s}) throw DimensionError("AFT-conv w_raw must be [h x s x s]");
}


// Head kernel [h x s x s] spread over channels: [s x s x d], channel c uses head c / (d/h).
Tensor channel_kernel(const Tensor& head_kernel, std::size_t d) {
  const std::size_t h = head_kernel.dim(0), s = head_kernel.dim(1), dh = d / h;
  Tensor k({s, s, d});
  for (std::size_t a = 0; a < s * s; ++a)
    for (std::size_t c = 0; c < d; ++c) k[a * d + c] = head_kernel[(c / dh) * s * s + a];
  return k;
}

// [h x s x s] -> [s x s x h]
Tensor head_last(const Tensor& head_kernel) {
  const std::size_t h = head_kernel.dim(0), s = head_kernel.dim(1);
  Tensor k({s, s, h});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t a = 0; a < s * s; ++a) k[a * h + i] = head_kernel[i * s * s + a];
  return k;
}

}  // namespace

AftForward aft_conv_forward(const Tensor& x, const AftConvParams& p, bool keep_cache) {
  check_conv_params(p);
  const std::size_t d = p.width(), h = p.heads, dh = d / h;
  GridInput in = flatten_grid(x, d);
  const std::size_t H = in.h, W = in.w, T = H * W, rows = in.batch * T;

  Tensor q = matmul(in.x, p.wq);
  Tensor k = matmul(in.x, p.wk);
  Tensor v = matmul(in.x, p.wv);
  Tensor bias = reparameterize_bias(p.w_raw, p.gamma, p.beta);
  Tensor kern(bias.shape());
  for (std::size_t n = 0; n < bias.numel(); ++n) kern[n] = std::expm1(bias[n]);
  const Tensor kern_c = channel_kernel(kern, d);
  const Tensor kern_h = head_last(kern);

  Tensor y({rows, d});
  Tensor expk({rows, h}), den({rows, h}), avg;
  if (keep_cache) avg = Tensor({rows, d});
  Buffer m(h), sum_e(h), sum_p(d);
  for (std::size_t b = 0; b < in.batch; ++b) {
    const double* K = k.ptr() + b * T * h;
    const double* V = v.ptr() + b * T * d;
    double* E = expk.ptr() + b * T * h;
    std::fill(m.begin(), m.end(), kNegInf);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < h; ++i) m[i] = std::max(m[i], K[t * h + i]);
    std::fill(sum_e.begin(), sum_e.end(), 0.0);
    std::fill(sum_p.begin(), sum_p.end(), 0.0);
    Tensor pgrid({H, W, d}), egrid({H, W, h});
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < h; ++i) {
        E[t * h + i] = std::exp(K[t * h + i] - m[i]);
        egrid[t * h + i] = E[t * h + i];
        sum_e[i] += E[t * h + i];
      }
      for (std::size_t c = 0; c < d; ++c) {
        const double pv = E[t * h + c / dh] * V[t * d + c];
        pgrid[t * d + c] = pv;
        sum_p[c] += pv;
      }
    }
    const Tensor num_conv = depthwise_conv2d(pgrid, kern_c);
    const Tensor den_conv = depthwise_conv2d(egrid, kern_h);
    double* Dn = den.ptr() + b * T * h;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < h; ++i) Dn[t * h + i] = den_conv[t * h + i] + sum_e[i];
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t row = b * T + t;
        const double a = (num_conv[t * d + c] + sum_p[c]) / Dn[t * h + c / dh];
        y[row * d + c] = sigmoid1(q[row * d + c]) * a;
        if (keep_cache) avg[row * d + c] = a;
      }
    }
  }

  AftForward out;
  out.y = y.reshape(in.batched ? Shape{in.batch, H, W, d} : Shape{H, W, d});
  if (keep_cache) {
    auto& c = out.cache;
    c.variant = Variant::Conv;
    c.batch = in.batch;
    c.length = T;
    c.width = d;
    c.grid_h = H;
    c.grid_w = W;
    c.batched = in.batched;
    c.window = p.kernel;
    c.fingerprint = fingerprint(p);
    c.x = std::move(in.x);
    c.q = std::move(q);
    c.k = std::move(k);
    c.v = std::move(v);
    c.avg = std::move(avg);
    c.denom = std::move(den);
    c.bias = std::move(bias);
    c.kernel = std::move(kern);
    c.exp_key = std::move(expk);
  }
  return out;
}

AftConvGrads aft_conv_backward(const AftCache& c, const AftConvParams& p, const Tensor& dy) {
  const Shape out_shape = c.batched ? Shape{c.batch, c.grid_h, c.grid_w, c.width} : Shape{c.grid_h, c.grid_w, c.width};
  check_cache(c, Variant::Conv, fingerprint(p), dy, out_shape);
  const std::size_t d = c.width, h = p.heads, dh = d / h, s = p.kernel;
  const std::size_t H = c.grid_h, W = c.grid_w, T = c.length, rows = c.batch * T;
  const Tensor dy2 = dy.reshape({rows, d});

  Tensor dq({rows, d}), davg({rows, d});
  for (std::size_t n = 0; n < rows * d; ++n) {
    const double sg = sigmoid1(c.q[n]);
    davg[n] = dy2[n] * sg;
    dq[n] = dy2[n] * c.avg[n] * sg * (1.0 - sg);
  }
  const Tensor kern_c = channel_kernel(c.kernel, d);
  const Tensor kern_h = head_last(c.kernel);

  Tensor dk({rows, h}), dv({rows, d});
  Tensor dkern_h({s, s, h});
  Buffer col_dn(d), col_dd(h);
  for (std::size_t b = 0; b < c.batch; ++b) {
    const double* E = c.exp_key.ptr() + b * T * h;
    const double* V = c.v.ptr() + b * T * d;
    const double* D = c.denom.ptr() + b * T * h;
    const double* A = c.avg.ptr() + b * T * d;
    const double* dA = davg.ptr() + b * T * d;

    Tensor dn({H, W, d}), dd({H, W, h}), pgrid({H, W, d}), egrid({H, W, h});
    std::fill(col_dn.begin(), col_dn.end(), 0.0);
    std::fill(col_dd.begin(), col_dd.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < h; ++i) egrid[t * h + i] = E[t * h + i];
      for (std::size_t cc = 0; cc < d; ++cc) {
        const std::size_t i = cc / dh;
        const double Dt = D[t * h + i];
        const double g = dA[t * d + cc] / Dt;
        dn[t * d + cc] = g;
        col_dn[cc] += g;
        dd[t * h + i] -= g * A[t * d + cc];
        pgrid[t * d + cc] = E[t * h + i] * V[t * d + cc];
      }
    }
    for (std::size_t n = 0; n < T * h; ++n) col_dd[n % h] += dd[n];

    const Tensor dp_conv = depthwise_conv2d_input_grad(dn, kern_c);
    const Tensor de_conv = depthwise_conv2d_input_grad(dd, kern_h);
    const Tensor dk_num = depthwise_conv2d_kernel_grad(pgrid, dn, s, d);
    const Tensor dk_den = depthwise_conv2d_kernel_grad(egrid, dd, s, h);
    for (std::size_t a = 0; a < s * s; ++a) {
      for (std::size_t cc = 0; cc < d; ++cc) dkern_h[a * h + cc / dh] += dk_num[a * d + cc];
      for (std::size_t i = 0; i < h; ++i) dkern_h[a * h + i] += dk_den[a * h + i];
    }

    double* dK = dk.ptr() + b * T * h;
    double* dV = dv.ptr() + b * T * d;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < h; ++i) dK[t * h + i] = de_conv[t * h + i] + col_dd[i];
      for (std::size_t cc = 0; cc < d; ++cc) {
        const std::size_t i = cc / dh;
        const double dp = dp_conv[t * d + cc] + col_dn[cc];
        dV[t * d + cc] = dp * E[t * h + i];
        dK[t * h + i] += dp * V[t * d + cc];
      }
      for (std::size_t i = 0; i < h; ++i) dK[t * h + i] *= E[t * h + i];
    }
  }

  // d kernel -> d w' (kernel = exp(w') - 1) -> reparameterization.
  Tensor dbias(c.bias.shape());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t a = 0; a < s * s; ++a)
      dbias[i * s * s + a] = dkern_h[a * h + i] * (c.kernel[i * s * s + a] + 1.0);
  ReparamGrads rg = reparameterize_bias_backward(p.w_raw, p.gamma, dbias);

  AftConvGrads g;
  project_backward(c.x, p.wq, p.wk, p.wv, dq, dk, dv, g.dx, g.dwq, g.dwk, g.dwv);
  g.dx.reshape_inplace(out_shape);
  g.dw_raw = std::move(rg.dw_raw);
  g.dgamma = std::move(rg.dgamma);
  g.dbeta = std::move(rg.dbeta);
  return g;
}

// ---------------------------------------------------------------------------

Tensor value_weights(const AftCache& c, const PositionBias* bias, std::size_t b, std::size_t t) {
  if (c.x.empty() || c.variant == Variant::Conv)
    throw UsageError("value_weights needs a full, local or simple forward cache");
  if (b >= c.batch || t >= c.length) throw DimensionError("value_weights: (batch, t) out of range");
  if (c.variant != Variant::Simple && bias == nullptr) throw UsageError("value_weights: bias required");
  const std::size_t T = c.length, d = c.width;
  const std::size_t row = b * T + t;
  const double* K = c.k.ptr() + b * T * d;
  const double* C = c.shift.ptr() + row * d;
  const double* D = c.denom.ptr() + row * d;
  Tensor out({T, d});
  Buffer wrow(T, 0.0);
  if (c.variant != Variant::Simple) bias->row(t, 0, T, wrow.data());
  for (std::size_t tp = 0; tp < T; ++tp) {
    if (c.mode.causal && tp > t) continue;
    double w = wrow[tp];
    if (c.variant == Variant::Local) {
      const std::size_t dist = t > tp ? t - tp : tp - t;
      if (dist >= c.window) {
        if (c.mode.hard_window) continue;
        w = 0.0;
      }
    } else if (c.variant == Variant::Simple) {
      w = 0.0;
    }
    for (std::size_t i = 0; i < d; ++i) out[tp * d + i] = std::exp(K[tp * d + i] + w - C[i]) / D[i];
  }
  return out;
}

}  // namespace aft
