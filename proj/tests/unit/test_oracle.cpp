#include <doctest.h>

#include <cmath>

#include "aft/aft_layers.hpp"
#include "aft/errors.hpp"
#include "aft/reference_oracle.hpp"
#include "test_util.hpp"

using namespace aft;

namespace {

// Element-by-element MHA with no tensor ops beyond indexing.
Tensor loop_mha(const Tensor& x, const oracle::MhaParams& p, bool causal) {
  const std::size_t T = x.dim(0), d = x.dim(1), dk = p.wq[0].dim(1);
  Tensor out({T, p.heads * dk});
  for (std::size_t hd = 0; hd < p.heads; ++hd) {
    auto proj = [&](const Tensor& w, std::size_t t, std::size_t j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += x.at(t, c) * w.at(c, j);
      return s;
    };
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> logit(T, -INFINITY);
      double m = -INFINITY;
      for (std::size_t u = 0; u < T; ++u) {
        if (causal && u > t) continue;
        double s = 0.0;
        for (std::size_t j = 0; j < dk; ++j) s += proj(p.wq[hd], t, j) * proj(p.wk[hd], u, j);
        logit[u] = s / std::sqrt(static_cast<double>(dk));
        m = std::max(m, logit[u]);
      }
      double z = 0.0;
      for (double l : logit) z += std::exp(l - m);
      for (std::size_t j = 0; j < dk; ++j) {
        double acc = 0.0;
        for (std::size_t u = 0; u < T; ++u) acc += std::exp(logit[u] - m) / z * proj(p.wv[hd], u, j);
        out.at(t, hd * dk + j) = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("mha: single position returns the value rows") {
  Rng rng(1);
  const auto p = oracle::init_mha_params(rng, 4, 2, 0.5);
  const Tensor x = randn(rng, {1, 4});
  const Tensor y = oracle::mha_forward(x, p, false);
  for (std::size_t hd = 0; hd < 2; ++hd) {
    const Tensor v = matmul(x, p.wv[hd]);
    for (std::size_t j = 0; j < 2; ++j) CHECK(y.at(0, hd * 2 + j) == doctest::Approx(v[j]).epsilon(1e-14));
  }
}

TEST_CASE("mha: identical rows give identical outputs") {
  Rng rng(2);
  const auto p = oracle::init_mha_params(rng, 4, 2, 0.5);
  const Tensor row = randn(rng, {1, 4});
  Tensor x({5, 4});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) x.at(t, c) = row[c];
  const Tensor y = oracle::mha_forward(x, p, false);
  for (std::size_t t = 1; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(t, c) == doctest::Approx(y.at(0, c)).epsilon(1e-14));
}

TEST_CASE("mha vs loop oracle") {
  Rng rng(3);
  for (bool causal : {false, true}) {
    const auto p = oracle::init_mha_params(rng, 4, 2, 0.7);
    const Tensor x = randn(rng, {4, 4});
    CHECK(max_abs_diff(oracle::mha_forward(x, p, causal), loop_mha(x, p, causal)) < 1e-12);
  }
  oracle::MhaParams bad = oracle::init_mha_params(rng, 4, 2, 0.5);
  bad.heads = 3;
  CHECK_THROWS_AS(oracle::mha_forward(randn(rng, {2, 4}), bad, false), ConfigError);
  CHECK_THROWS_AS(oracle::init_mha_params(rng, 4, 3, 0.5), ConfigError);
}

TEST_CASE("mha attention rows sum to one") {
  // With V = identity on a one-hot input the output row is the attention row.
  const std::size_t T = 6;
  Rng rng(4);
  oracle::MhaParams p;
  p.heads = 1;
  p.wq.push_back(randn(rng, {T, T}));
  p.wk.push_back(randn(rng, {T, T}));
  Tensor eye({T, T});
  for (std::size_t i = 0; i < T; ++i) eye.at(i, i) = 1.0;
  p.wv.push_back(eye);
  for (bool causal : {false, true}) {
    const Tensor a = oracle::mha_forward(eye, p, causal);
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      for (std::size_t u = 0; u < T; ++u) {
        s += a.at(t, u);
        if (causal && u > t) CHECK(a.at(t, u) == 0.0);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("aft attention matrices") {
  const std::size_t T = 5, d = 3;
  SUBCASE("zero keys and bias give uniform weights") {
    const Tensor q({T, d});
    const Tensor a = oracle::aft_attention_matrices(q, Tensor({T, d}), Tensor({T, T}), {});
    // query gate sigmoid(0) = 0.5 scales the uniform 1/T weights
    for (double v : a.data()) CHECK(v == doctest::Approx(0.5 / T).epsilon(1e-14));
  }
  SUBCASE("causal mask") {
    Rng rng(5);
    const Tensor q = randn(rng, {T, d}), k = randn(rng, {T, d});
    const Tensor w = materialize_bias(PositionBias::dense(randn(rng, {T, T})), T, {.causal = true});
    const Tensor a = oracle::aft_attention_matrices(q, k, w, {.causal = true});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t t = 0; t < T; ++t) {
        double s = 0.0;
        for (std::size_t u = 0; u < T; ++u) {
          if (u > t) CHECK(a.at(i, t, u) == 0.0);
          s += a.at(i, t, u);
        }
        // unqueried weights sum to one: divide out the gate
        CHECK(s / (1.0 / (1.0 + std::exp(-q.at(t, i)))) == doctest::Approx(1.0).epsilon(1e-12));
      }
  }
  SUBCASE("weighted values match the fast path before Wo") {
    Rng rng(6);
    for (bool causal : {false, true}) {
      AftFullParams p = aft::testing::random_full_params(rng, d, T);
      Tensor eye({d, d});
      for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
      p.proj.wo = eye;
      const Tensor x = randn(rng, {T, d});
      const Tensor q = matmul(x, p.proj.wq), k = matmul(x, p.proj.wk), v = matmul(x, p.proj.wv);
      const Tensor a = oracle::aft_attention_matrices(q, k, materialize_bias(p.bias, T, {.causal = causal}),
                                                      {.causal = causal});
      Tensor pre({T, d});
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t u = 0; u < T; ++u) pre.at(t, i) += a.at(i, t, u) * v.at(u, i);
      CHECK(max_abs_diff(pre, aft_full_forward(x, p, {.causal = causal}).y) < 1e-10);
    }
  }
}

TEST_CASE("aft_conv_direct examples") {
  Rng rng(7);
  const std::size_t H = 3, W = 4, d = 4, h = 2;
  AftConvParams p = init_conv_params(rng, d, h, 3, 0.5, 0.1);
  const Tensor x = randn(rng, {H, W, d});
  const Tensor k = matmul(x.reshape({H * W, d}), p.wk), v = matmul(x.reshape({H * W, d}), p.wv);
  const Tensor q = matmul(x.reshape({H * W, d}), p.wq);

  SUBCASE("zero bias is per-head global pooling") {
    const Tensor y = oracle::aft_conv_direct(x, p).reshape({H * W, d});
    for (std::size_t t = 0; t < H * W; ++t)
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t head = c / (d / h);
        double num = 0.0, den = 0.0;
        for (std::size_t u = 0; u < H * W; ++u) {
          num += std::exp(k.at(u, head)) * v.at(u, c);
          den += std::exp(k.at(u, head));
        }
        CHECK(y.at(t, c) == doctest::Approx(num / den / (1.0 + std::exp(-q.at(t, c)))).epsilon(1e-12));
      }
  }
  SUBCASE("center-only bias touches only the self position") {
    // gamma = 0 makes w' = beta everywhere; instead put a single raw spike and
    // check the reparameterized bias is largest at the center.
    p.w_raw = Tensor({h, 3, 3});
    p.w_raw.at(0, 1, 1) = 1.0;
    p.w_raw.at(1, 1, 1) = 1.0;
    p.gamma = Tensor({h}, 1.0);
    // subtract the constant off-center value through beta so only the center is nonzero
    const Tensor wb0 = reparameterize_bias(p.w_raw, p.gamma, Tensor({h}));
    p.beta = Tensor({h}, -wb0.at(0, 0, 0));
    const Tensor wb = reparameterize_bias(p.w_raw, p.gamma, p.beta);
    CHECK(std::abs(wb.at(0, 0, 0)) < 1e-12);
    const double center = wb.at(0, 1, 1);
    REQUIRE(center > 0.0);
    const Tensor y = oracle::aft_conv_direct(x, p).reshape({H * W, d});
    for (std::size_t t = 0; t < H * W; ++t)
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t head = c / (d / h);
        double num = 0.0, den = 0.0;
        for (std::size_t u = 0; u < H * W; ++u) {
          const double e = std::exp(k.at(u, head) + (u == t ? center : 0.0));
          num += e * v.at(u, c);
          den += e;
        }
        CHECK(y.at(t, c) == doctest::Approx(num / den / (1.0 + std::exp(-q.at(t, c)))).epsilon(1e-10));
      }
  }
}

TEST_CASE("oracle agreement across the property grid") {
  Rng rng(8);
  double worst = 0.0;
  for (std::size_t T = 1; T <= 8; ++T)
    for (std::size_t d : {1u, 2u, 4u, 8u})
      for (bool causal : {false, true}) {
        const AftFullParams p = aft::testing::random_full_params(rng, d, T, T % 3 == 0 ? 2 : 0);
        const Tensor x = randn(rng, {T, d});
        const LayerMode mode{.causal = causal};
        worst = std::max(worst, max_abs_diff(aft_full_forward(x, p, mode).y, oracle::aft_via_attention(x, p, mode)));
        for (std::size_t s = 0; s <= T; ++s) {
          worst = std::max(worst,
                           max_abs_diff(aft_local_forward(x, p, s, mode).y, oracle::aft_via_attention(x, p, mode, s)));
          if (s > 0) {
            const LayerMode hard{.causal = causal, .hard_window = true};
            worst = std::max(
                worst, max_abs_diff(aft_local_forward(x, p, s, hard).y, oracle::aft_via_attention(x, p, hard, s)));
          }
        }
      }
  CHECK(worst < 1e-10);

  double conv_worst = 0.0;
  for (std::size_t H = 1; H <= 6; ++H)
    for (std::size_t W = 1; W <= 6; W += 2)
      for (std::size_t s : {1u, 3u, 5u}) {
        const AftConvParams p = aft::testing::random_conv_params(rng, 4, 2, s);
        const Tensor x = randn(rng, {H, W, 4});
        conv_worst = std::max(conv_worst, max_abs_diff(aft_conv_forward(x, p).y, oracle::aft_conv_direct(x, p)));
      }
  CHECK(conv_worst < 1e-10);
}
