#include "aft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "aft/errors.hpp"

namespace aft {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::span<const double> values) : shape_(std::move(shape)) {
  check_shape(shape_);
  if (values.size() != shape_numel(shape_))
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         to_string(shape_));
  data_.assign(values.begin(), values.end());
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size())) {}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  return shape_[axis];
}

double& Tensor::at(std::size_t i, std::size_t j) {
  if (rank() != 2 || i >= shape_[0] || j >= shape_[1])
    throw DimensionError("2-D index out of range for shape " + to_string(shape_));
  return data_[i * shape_[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j) const { return const_cast<Tensor*>(this)->at(i, j); }

double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  if (rank() != 3 || i >= shape_[0] || j >= shape_[1] || k >= shape_[2])
    throw DimensionError("3-D index out of range for shape " + to_string(shape_));
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return const_cast<Tensor*>(this)->at(i, j, k);
}

Tensor Tensor::reshape(Shape shape) const {
  Tensor out = *this;
  out.reshape_inplace(std::move(shape));
  return out;
}

void Tensor::reshape_inplace(Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != numel())
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  shape_ = std::move(shape);
}

void Tensor::fill_inplace(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

void Tensor::add_inplace(const Tensor& other) {
  if (other.shape_ != shape_)
    throw DimensionError("add_inplace shape mismatch " + to_string(shape_) + " vs " + to_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::scale_inplace(double factor) noexcept {
  for (auto& x : data_) x *= factor;
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// Broadcasting ---------------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.empty() || b.empty()) throw DimensionError("cannot broadcast an empty tensor");
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace {

// Strides of `s` viewed as rank `r` with broadcast axes given stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + (r - s.size());
    strides[oi] = s[i] == 1 ? 0 : stride;
    stride *= s[i];
  }
  return strides;
}

template <class Op>
Tensor binary(const Tensor& a, const Tensor& b, Op op) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = op(a[i], b[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), shape);
  const auto sb = broadcast_strides(b.shape(), shape);
  Tensor out(shape);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t n = 0; n < out.numel(); ++n) {
    out[n] = op(a[oa], b[ob]);
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < shape[ax]) break;
      oa -= sa[ax] * shape[ax];
      ob -= sb[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

template <class Op>
Tensor unary(const Tensor& x, Op op) {
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = op(x[i]);
  return out;
}

void require_nonempty(const Tensor& x, const char* what) {
  if (x.empty()) throw DimensionError(std::string(what) + ": empty tensor");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return binary(a, b, [](double x, double y) { return x / y; });
}
Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; });
}
Tensor sigmoid(const Tensor& x) {
  return unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}
Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); });
}

// Reductions -----------------------------------------------------------------

namespace {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim || s.size() == 1) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

template <class Init, class Fold>
Tensor reduce(const Tensor& x, std::size_t axis, bool keepdim, Init init, Fold fold) {
  require_nonempty(x, "reduction");
  const auto sp = split_axis(x.shape(), axis);
  Tensor out(reduced_shape(x.shape(), axis, keepdim), init);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t a = 0; a < sp.extent; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        double& acc = out[o * sp.inner + i];
        acc = fold(acc, x[(o * sp.extent + a) * sp.inner + i]);
      }
  return out;
}

}  // namespace

Tensor sum_over(const Tensor& x, std::size_t axis, bool keepdim) {
  return reduce(x, axis, keepdim, 0.0, [](double acc, double v) { return acc + v; });
}

Tensor max_over(const Tensor& x, std::size_t axis, bool keepdim) {
  return reduce(x, axis, keepdim, -std::numeric_limits<double>::infinity(),
                [](double acc, double v) { return std::max(acc, v); });
}

Tensor softmax_lastdim(const Tensor& x) {
  require_nonempty(x, "softmax_lastdim");
  const std::size_t n = x.shape().back();
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t row = 0; row < x.numel() / n; ++row) {
    const double* in = x.ptr() + row * n;
    double* o = out.ptr() + row * n;
    const double m = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - m);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return out;
}

// Layout ---------------------------------------------------------------------

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a 2-D tensor, got " + to_string(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return out;
}

Tensor permute(const Tensor& x, std::span<const std::size_t> axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: axis count does not match rank");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || seen[axes[i]]) throw DimensionError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = x.shape()[axes[i]];
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
  Tensor out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t n = 0; n < out.numel(); ++n) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[axes[i]];
    out[n] = x[off];
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) break;
      idx[ax] = 0;
    }
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = split_axis(x.shape(), axis);
  if (begin >= end || end > sp.extent)
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for axis " +
                         std::to_string(axis) + " of " + to_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  Tensor out(shape);
  const std::size_t width = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::memcpy(out.ptr() + o * width, x.ptr() + (o * sp.extent + begin) * sp.inner, width * sizeof(double));
  return out;
}

// Linear algebra -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " * " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict orow = out.ptr() + i * n;
    const double* arow = a.ptr() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* __restrict brow = b.ptr() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

namespace {

struct ConvDims {
  std::size_t h, w, c, s, kc;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3) throw DimensionError("depthwise_conv2d expects x of shape [H x W x C], got " + to_string(x.shape()));
  if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1))
    throw DimensionError("depthwise_conv2d expects kernel of shape [s x s x C], got " + to_string(kernel.shape()));
  const std::size_t s = kernel.dim(0);
  if (s % 2 == 0) throw ConfigError("depthwise_conv2d kernel size must be odd, got " + std::to_string(s));
  const std::size_t kc = kernel.dim(2);
  if (kc != 1 && kc != x.dim(2))
    throw DimensionError("kernel channels " + std::to_string(kc) + " incompatible with input " + to_string(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2), s, kc};
}

}  // namespace

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel) {
  const auto d = conv_dims(x, kernel);
  const auto half = static_cast<std::ptrdiff_t>(d.s / 2);
  const auto H = static_cast<std::ptrdiff_t>(d.h), W = static_cast<std::ptrdiff_t>(d.w);
  Tensor out(x.shape());
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      double* o = out.ptr() + (r * W + c) * d.c;
      for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(d.s); ++a) {
        const std::ptrdiff_t rr = r + a - half;
        if (rr < 0 || rr >= H) continue;
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(d.s); ++b) {
          const std::ptrdiff_t cc = c + b - half;
          if (cc < 0 || cc >= W) continue;
          const double* in = x.ptr() + (rr * W + cc) * d.c;
          const double* k = kernel.ptr() + (a * static_cast<std::ptrdiff_t>(d.s) + b) * d.kc;
          if (d.kc == 1) {
            for (std::size_t ch = 0; ch < d.c; ++ch) o[ch] += in[ch] * k[0];
          } else {
            for (std::size_t ch = 0; ch < d.c; ++ch) o[ch] += in[ch] * k[ch];
          }
        }
      }
    }
  return out;
}

Tensor depthwise_conv2d_input_grad(const Tensor& dout, const Tensor& kernel) {
  const auto d = conv_dims(dout, kernel);
  const auto half = static_cast<std::ptrdiff_t>(d.s / 2);
  const auto H = static_cast<std::ptrdiff_t>(d.h), W = static_cast<std::ptrdiff_t>(d.w);
  Tensor dx(dout.shape());
  // out[r,c] reads x[r+a-half, c+b-half]; scatter back.
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      const double* g = dout.ptr() + (r * W + c) * d.c;
      for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(d.s); ++a) {
        const std::ptrdiff_t rr = r + a - half;
        if (rr < 0 || rr >= H) continue;
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(d.s); ++b) {
          const std::ptrdiff_t cc = c + b - half;
          if (cc < 0 || cc >= W) continue;
          double* o = dx.ptr() + (rr * W + cc) * d.c;
          const double* k = kernel.ptr() + (a * static_cast<std::ptrdiff_t>(d.s) + b) * d.kc;
          for (std::size_t ch = 0; ch < d.c; ++ch) o[ch] += g[ch] * k[d.kc == 1 ? 0 : ch];
        }
      }
    }
  return dx;
}

Tensor depthwise_conv2d_kernel_grad(const Tensor& x, const Tensor& dout, std::size_t s,
                                    std::size_t kernel_channels) {
  if (x.shape() != dout.shape() || x.rank() != 3)
    throw DimensionError("depthwise_conv2d_kernel_grad: x " + to_string(x.shape()) + " vs dout " +
                         to_string(dout.shape()));
  if (s % 2 == 0) throw ConfigError("depthwise_conv2d kernel size must be odd, got " + std::to_string(s));
  if (kernel_channels != 1 && kernel_channels != x.dim(2))
    throw DimensionError("kernel channel count must be 1 or match input channels");
  const std::size_t C = x.dim(2);
  const auto half = static_cast<std::ptrdiff_t>(s / 2);
  const auto H = static_cast<std::ptrdiff_t>(x.dim(0)), W = static_cast<std::ptrdiff_t>(x.dim(1));
  Tensor dk({s, s, kernel_channels});
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      const double* g = dout.ptr() + (r * W + c) * C;
      for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(s); ++a) {
        const std::ptrdiff_t rr = r + a - half;
        if (rr < 0 || rr >= H) continue;
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(s); ++b) {
          const std::ptrdiff_t cc = c + b - half;
          if (cc < 0 || cc >= W) continue;
          const double* in = x.ptr() + (rr * W + cc) * C;
          double* k = dk.ptr() + (a * static_cast<std::ptrdiff_t>(s) + b) * kernel_channels;
          for (std::size_t ch = 0; ch < C; ++ch) k[kernel_channels == 1 ? 0 : ch] += g[ch] * in[ch];
        }
      }
    }
  return dk;
}

// Random ---------------------------------------------------------------------

Tensor randn(Rng& rng, Shape shape, double mean, double stddev) {
  if (!(stddev >= 0.0)) throw ConfigError("randn: standard deviation must be non-negative");
  Tensor out(std::move(shape));
  for (auto& v : out.data()) v = stddev == 0.0 ? mean : rng.normal(mean, stddev);
  return out;
}

Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor out(std::move(shape));
  for (auto& v : out.data()) v = lo + (hi - lo) * rng.uniform();
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    m = std::max(m, d);
  }
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  return a.shape() == b.shape() &&
         (a.numel() == 0 || std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(double)) == 0);
}

}  // namespace aft
