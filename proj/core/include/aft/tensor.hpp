#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "aft/memory.hpp"
#include "aft/rng.hpp"

namespace aft {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. A default-constructed tensor is empty
/// (no shape, no data); any constructed tensor has rank >= 1 and positive
/// extents. Copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::span<const double> values);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor zeros_like(const Tensor& t) { return t.empty() ? Tensor() : Tensor(t.shape()); }

  bool empty() const noexcept { return data_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return {data_.data(), data_.size()}; }
  std::span<const double> data() const noexcept { return {data_.data(), data_.size()}; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-checked element access.
  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t i, std::size_t j, std::size_t k);
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  /// Same data, new shape. Element order is unchanged.
  Tensor reshape(Shape shape) const;
  void reshape_inplace(Shape shape);

  void fill_inplace(double value) noexcept;
  void add_inplace(const Tensor& other);
  void scale_inplace(double factor) noexcept;

  bool all_finite() const noexcept;

 private:
  Shape shape_;
  Buffer data_;
};

// Elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);

/// Shape produced by broadcasting a against b (trailing axes aligned, extent 1
/// stretches). Throws DimensionError when incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

// Reductions and layout ---------------------------------------------------

Tensor sum_over(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor max_over(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor softmax_lastdim(const Tensor& x);

/// 2-D transpose.
Tensor transpose(const Tensor& x);
/// General axis permutation.
Tensor permute(const Tensor& x, std::span<const std::size_t> axes);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Linear algebra ----------------------------------------------------------

/// [m x k] * [k x n]. Each output element accumulates over k in ascending
/// order, so results are bit-identical to the textbook triple loop.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Per-channel 2-D cross-correlation with zero "same" padding.
/// x: [H x W x C], kernel: [s x s x C] or [s x s x 1] (broadcast over C), s odd.
/// out[r, c, ch] = sum_{a,b} x[r + a - s/2, c + b - s/2, ch] * kernel[a, b, ch].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel);
/// Adjoint of depthwise_conv2d with respect to x.
Tensor depthwise_conv2d_input_grad(const Tensor& dout, const Tensor& kernel);
/// Adjoint of depthwise_conv2d with respect to the kernel; returns a kernel of
/// shape [s x s x kernel_channels] (channels summed when kernel_channels == 1).
Tensor depthwise_conv2d_kernel_grad(const Tensor& x, const Tensor& dout, std::size_t s,
                                    std::size_t kernel_channels);

// Random ------------------------------------------------------------------

Tensor randn(Rng& rng, Shape shape, double mean = 0.0, double stddev = 1.0);
Tensor rand_uniform(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0);

// Comparison helpers -------------------------------------------------------

double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

}  // namespace aft
