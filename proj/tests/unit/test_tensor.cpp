#include <doctest.h>

#include <array>
#include <cmath>

#include "aft/errors.hpp"
#include "aft/memory.hpp"
#include "aft/rng.hpp"
#include "aft/tensor.hpp"

using namespace aft;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// Straight from the cross-correlation definition, bounds-checked per tap.
Tensor naive_conv(const Tensor& x, const Tensor& k) {
  const long H = static_cast<long>(x.dim(0)), W = static_cast<long>(x.dim(1));
  const std::size_t C = x.dim(2), s = k.dim(0), kc = k.dim(2);
  const long half = static_cast<long>(s / 2);
  Tensor out(x.shape());
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch) {
        double acc = 0.0;
        for (std::size_t a = 0; a < s; ++a)
          for (std::size_t b = 0; b < s; ++b) {
            const long rr = r + static_cast<long>(a) - half, cc = c + static_cast<long>(b) - half;
            if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
            acc += x.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc), ch) *
                   k.at(a, b, kc == 1 ? 0 : ch);
          }
        out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), ch) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("rng stream is fixed") {
  // First outputs of SplitMix64 seeded with 0 (reference values of the algorithm).
  Rng r(0);
  CHECK(r.next_u64() == 0xE220A8397B1DCDAFULL);
  CHECK(r.next_u64() == 0x6E789E6AA1B965F4ULL);
  CHECK(r.next_u64() == 0x06C45D188009454FULL);

  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(a.derive(1).next_u64() != a.derive(2).next_u64());
  CHECK(a.derive(1).next_u64() == b.derive(1).next_u64());
}

TEST_CASE("matmul") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(bit_equal(matmul(eye, m), m));
  CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}))[0] == 11.0);

  Rng rng(1);
  const Tensor a = randn(rng, {5, 7}), b = randn(rng, {7, 3});
  CHECK(bit_equal(matmul(a, b), naive_matmul(a, b)));

  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  try {
    matmul(a, a);
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[5x7]") != std::string::npos);
  }
}

TEST_CASE("softmax") {
  auto sm = [](std::initializer_list<double> v) { return softmax_lastdim(Tensor({v.size()}, v)); };
  Tensor s = sm({0, 0});
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);
  s = sm({1000, 1000});
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);
  s = sm({0, std::log(3.0)});
  CHECK(s[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(s[1] == doctest::Approx(0.75).epsilon(1e-14));

  Rng rng(2);
  const Tensor x = randn(rng, {4, 3, 9}, 0.0, 20.0);
  const Tensor y = softmax_lastdim(x);
  const Tensor rows = sum_over(y, 2);
  for (double r : rows.data()) CHECK(std::abs(r - 1.0) < 1e-12);
  for (double v : y.data()) CHECK(v > 0.0);

  CHECK_THROWS_AS(softmax_lastdim(Tensor()), DimensionError);
}

TEST_CASE("elementwise and reductions") {
  CHECK(sigmoid(Tensor({1}, {0.0}))[0] == 0.5);
  CHECK(exp(Tensor({1}, {0.0}))[0] == 1.0);

  const Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(bit_equal(sum_over(m, 0), Tensor({2}, {4, 6})));
  CHECK(bit_equal(sum_over(m, 1), Tensor({2}, {3, 7})));
  CHECK(sum_over(m, 0, true).shape() == Shape{1, 2});
  CHECK(bit_equal(max_over(m, 1), Tensor({2}, {2, 4})));

  Rng rng(3);
  const std::size_t T = 5;
  const Tensor col = randn(rng, {T, 1}), row = randn(rng, {1, T});
  const Tensor sum = add(col, row);
  REQUIRE(sum.shape() == Shape{T, T});
  bool same = true;
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) same = same && sum.at(i, j) == col[i] + row[j];
  CHECK(same);

  const Tensor prod = mul(randn(rng, {2, 3, 4}), Tensor({4}, {1, 2, 3, 4}));
  CHECK(prod.shape() == Shape{2, 3, 4});
  CHECK(bit_equal(sub(m, m), Tensor({2, 2})));
  CHECK(bit_equal(div(m, Tensor({1}, {2.0})), scale(m, 0.5)));

  CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({2, 2})), DimensionError);
  CHECK_THROWS_AS(broadcast_shape({3}, {4}), DimensionError);
  CHECK(broadcast_shape({2, 1, 4}, {3, 1}) == Shape{2, 3, 4});
}

TEST_CASE("layout invariants") {
  Rng rng(4);
  const Tensor x = randn(rng, {2, 3, 4});
  const Tensor r = x.reshape({6, 4});
  CHECK(bit_equal(r.reshape({2, 3, 4}), x));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(r[i] == x[i]);
  CHECK_THROWS_AS(x.reshape({5, 5}), DimensionError);

  const Tensor m = randn(rng, {3, 5});
  CHECK(bit_equal(transpose(transpose(m)), m));
  CHECK(transpose(m).at(4, 2) == m.at(2, 4));

  // Reducing axis 0 commutes with transposing the remaining two axes.
  const std::array<std::size_t, 3> swap12{0, 2, 1};
  const Tensor a = sum_over(permute(x, swap12), 0);
  const Tensor b = transpose(sum_over(x, 0));
  CHECK(bit_equal(a, b));
  const Tensor ma = max_over(permute(x, swap12), 0);
  CHECK(bit_equal(ma, transpose(max_over(x, 0))));

  const Tensor s = slice(x, 1, 1, 3);
  CHECK(s.shape() == Shape{2, 2, 4});
  CHECK(s.at(1, 0, 2) == x.at(1, 1, 2));
  CHECK_THROWS_AS(slice(x, 1, 2, 4), DimensionError);
}

TEST_CASE("copies are deep") {
  Tensor a({2}, {1, 2});
  Tensor b = a;
  b[0] = 9;
  CHECK(a[0] == 1.0);
  CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
}

TEST_CASE("depthwise_conv2d") {
  Rng rng(5);
  const Tensor x = randn(rng, {6, 6, 3});
  CHECK(bit_equal(depthwise_conv2d(x, Tensor({3, 3, 3})), Tensor(x.shape())));
  CHECK(bit_equal(depthwise_conv2d(x, Tensor({1, 1, 1}, {2.5})), scale(x, 2.5)));

  const Tensor k = randn(rng, {3, 3, 3});
  CHECK(max_abs_diff(depthwise_conv2d(x, k), naive_conv(x, k)) < 1e-12);
  const Tensor kb = randn(rng, {5, 5, 1});
  CHECK(max_abs_diff(depthwise_conv2d(x, kb), naive_conv(x, kb)) < 1e-12);

  const Tensor k1 = randn(rng, {3, 3, 3}), k2 = randn(rng, {3, 3, 3});
  const Tensor lhs = depthwise_conv2d(x, add(scale(k1, 0.3), scale(k2, -1.7)));
  const Tensor rhs = add(scale(depthwise_conv2d(x, k1), 0.3), scale(depthwise_conv2d(x, k2), -1.7));
  CHECK(max_abs_diff(lhs, rhs) < 1e-12);

  // Adjoints: <conv(x, k), g> == <x, conv_input_grad(g, k)> == <k, conv_kernel_grad(x, g)>.
  const Tensor g = randn(rng, x.shape());
  auto dot = [](const Tensor& p, const Tensor& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) s += p[i] * q[i];
    return s;
  };
  const double base = dot(depthwise_conv2d(x, k), g);
  CHECK(dot(x, depthwise_conv2d_input_grad(g, k)) == doctest::Approx(base).epsilon(1e-12));
  CHECK(dot(k, depthwise_conv2d_kernel_grad(x, g, 3, 3)) == doctest::Approx(base).epsilon(1e-12));
  const double base_b = dot(depthwise_conv2d(x, kb), g);
  CHECK(dot(kb, depthwise_conv2d_kernel_grad(x, g, 5, 1)) == doctest::Approx(base_b).epsilon(1e-12));

  CHECK_THROWS_AS(depthwise_conv2d(x, Tensor({2, 2, 3})), ConfigError);
  CHECK_THROWS_AS(depthwise_conv2d(x, Tensor({3, 3, 2})), DimensionError);
}

TEST_CASE("randn") {
  Rng rng(6);
  const Tensor c = randn(rng, {3, 2}, 1.5, 0.0);
  for (double v : c.data()) CHECK(v == 1.5);
  CHECK(rng.counter() == 0);

  Rng r1(11), r2(11);
  CHECK(bit_equal(randn(r1, {4}), randn(r2, {4})));

  Rng big(2024);
  const double stddev = 0.1;
  const Tensor s = randn(big, {1000000}, 0.0, stddev);
  double mean = 0.0, sq = 0.0;
  for (double v : s.data()) mean += v;
  mean /= 1e6;
  for (double v : s.data()) sq += (v - mean) * (v - mean);
  CHECK(std::abs(mean) < 5.0 * stddev / 1e3);
  CHECK(std::sqrt(sq / 1e6) == doctest::Approx(stddev).epsilon(0.01));

  CHECK_THROWS_AS(randn(rng, {2}, 0.0, -1.0), ConfigError);
}

TEST_CASE("memory probe sees tensor storage") {
  MemoryProbe probe;
  {
    Tensor a({100, 10});
    Tensor b({50});
    CHECK(probe.live_above_baseline() == 1050);
  }
  CHECK(probe.peak_above_baseline() == 1050);
  CHECK(probe.live_above_baseline() == 0);
}
