#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aft/bench.hpp"
#include "aft/errors.hpp"
#include "aft/model.hpp"

using namespace aft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("aft_bench_" + name);
  fs::remove_all(p);
  return p;
}

Model tiny_model(Variant v, std::size_t rank = 0) {
  ModelConfig c;
  c.layers = 2;
  c.d = 8;
  c.variant = v;
  c.window = 3;
  c.factor_rank = rank;
  c.heads = 2;
  c.kernel = 3;
  c.vocab = 7;
  c.max_len = 6;
  c.dropout = 0.0;
  Rng rng(5);
  return init_model(c, rng);
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("conv grid picks the squarest factorization") {
  CHECK(bench::conv_grid(1) == std::pair<std::size_t, std::size_t>{1, 1});
  CHECK(bench::conv_grid(256) == std::pair<std::size_t, std::size_t>{16, 16});
  CHECK(bench::conv_grid(512) == std::pair<std::size_t, std::size_t>{16, 32});
  CHECK(bench::conv_grid(2048) == std::pair<std::size_t, std::size_t>{32, 64});
  CHECK(bench::conv_grid(7) == std::pair<std::size_t, std::size_t>{1, 7});
}

TEST_CASE("log-log slope of exact power laws") {
  const std::vector<double> x{2, 4, 8, 16};
  std::vector<double> lin, quad;
  for (double v : x) {
    lin.push_back(3 * v);
    quad.push_back(0.5 * v * v);
  }
  CHECK(bench::loglog_slope(x, lin) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bench::loglog_slope(x, quad) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK_THROWS_AS(bench::loglog_slope({2}, {1}), UsageError);
  CHECK_THROWS_AS(bench::loglog_slope({2, 2}, {1, 3}), UsageError);
}

TEST_CASE("scaling config validation") {
  bench::ScalingConfig c;
  c.trials = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.variants = {"dense"};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lengths = {};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.widths = {6};  // 4 conv heads do not divide 6
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("small scaling run: T=1 rows, memory shapes, schema") {
  bench::ScalingConfig c;
  c.lengths = {1, 16, 32, 64};
  c.widths = {4};
  c.window = 4;
  c.factor_rank = 4;
  const auto report = bench::run_scaling(c);
  REQUIRE(report.rows.size() == 5 * 4);
  for (const auto& r : report.rows) {
    CAPTURE(r.variant);
    CAPTURE(r.T);
    CHECK_FALSE(r.skipped);
    CHECK(r.wall_ns > 0.0);
    CHECK(r.params > 0);
    if (r.variant == "simple") CHECK(r.peak_floats <= 8 * r.T * r.d);
    if (r.variant == "local") CHECK(r.s == std::min<std::size_t>(4, r.T));
  }
  // the explicit oracle holds d x T x T weights
  for (const auto& r : report.rows)
    if (r.variant == "attention") CHECK(r.peak_floats >= r.d * r.T * r.T);

  std::ostringstream os;
  bench::write_rows_csv(os, report.rows);
  const auto lines = csv_lines(os.str());
  CHECK(lines.front() == bench::kRowHeader);
  CHECK(lines.size() == report.rows.size() + 1);
  for (const auto& l : lines) CHECK(std::count(l.begin(), l.end(), ',') == 7);

  std::ostringstream ss;
  bench::write_slopes_csv(ss, report.slopes);
  CHECK(csv_lines(ss.str()).front() == bench::kSlopeHeader);
  CHECK(report.slopes.size() == 10);
  CHECK(report.slope("simple", 4, "memory").has_value());
  CHECK_FALSE(report.slope("simple", 5, "memory").has_value());
}

TEST_CASE("rows over the float budget are skipped, not fatal") {
  bench::ScalingConfig c;
  c.variants = {"attention", "simple"};
  c.lengths = {8, 64};
  c.widths = {2};
  c.max_floats = 2 * 32 * 32;
  const auto report = bench::run_scaling(c);
  REQUIRE(report.rows.size() == 4);
  CHECK_FALSE(report.rows[0].skipped);
  CHECK(report.rows[1].skipped);
  CHECK_FALSE(report.rows[3].skipped);
  std::ostringstream os;
  bench::write_rows_csv(os, report.rows);
  CHECK(csv_lines(os.str())[2] == "attention,64,2,0,,,,skipped");
  // a single surviving point gives no attention slope
  CHECK_FALSE(report.slope("attention", 2, "time").has_value());
}

TEST_CASE("bias export: dense full model round-trips through CSV") {
  const Model m = tiny_model(Variant::Full);
  const auto dir = scratch_dir("dense");
  const auto files = bench::export_bias(m, 1, std::nullopt, bench::Format::Both, dir);
  REQUIRE(files.size() == 2);
  CHECK(files[0].filename() == "bias_L1_H0.csv");
  CHECK(files[1].filename() == "bias_L1_H0.pgm");
  const Tensor expect = exp(materialize_bias(m.blocks[1].attn.bias, 6, {.causal = true}));
  const Tensor got = bench::read_matrix_csv(files[0]);
  REQUIRE(got.shape() == Shape{6, 6});
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got[i] == expect[i]);
  // causal: nothing above the diagonal
  CHECK(got.at(0, 5) == 0.0);
  const auto pgm = bench::read_pgm(files[1]);
  CHECK(pgm.width == 6);
  CHECK(pgm.height == 6);
  CHECK(pgm.pixels[5] == 0);
}

TEST_CASE("bias export: factorized and local maps") {
  const Model f = tiny_model(Variant::Full, 2);
  const auto maps = bench::bias_maps(f, 0, 0);
  REQUIRE(maps.size() == 1);
  const Tensor expect = exp(materialize_bias(f.blocks[0].attn.bias, 6, {.causal = true}));
  for (std::size_t i = 0; i < expect.numel(); ++i) CHECK(maps[0].values[i] == expect[i]);

  const Model l = tiny_model(Variant::Local);
  const Tensor lm = bench::bias_maps(l, 0, std::nullopt)[0].values;
  // outside the window of 3 the bias is 0, so exp gives exactly 1
  CHECK(lm.at(5, 0) == 1.0);
  CHECK(lm.at(5, 4) == std::exp(std::get<DenseBias>(l.blocks[0].attn.bias.param).w.at(5, 4)));
}

TEST_CASE("bias export: conv heads and simple lookup errors") {
  Model c = tiny_model(Variant::Conv);
  // gamma = beta = 0 at init: exp(0) - 1 everywhere, a constant map
  auto maps = bench::bias_maps(c, 1, std::nullopt);
  REQUIRE(maps.size() == 2);
  CHECK(maps[1].head == 1);
  CHECK(maps[1].values.shape() == Shape{3, 3});
  for (double v : maps[1].values.data()) CHECK(v == 0.0);
  const auto dir = scratch_dir("conv");
  const auto files = bench::export_bias(c, 1, 1, bench::Format::Pgm, dir);
  REQUIRE(files.size() == 1);
  CHECK(files[0].filename() == "bias_L1_H1.pgm");
  const auto pgm = bench::read_pgm(files[0]);
  CHECK(pgm.pixels == std::vector<unsigned char>(9, 0));

  c.blocks[0].conv.gamma.fill_inplace(1.0);
  const Tensor k = bench::bias_maps(c, 0, 0)[0].values;
  const Tensor w = reparameterize_bias(c.blocks[0].conv.w_raw, c.blocks[0].conv.gamma, c.blocks[0].conv.beta);
  for (std::size_t i = 0; i < 9; ++i) CHECK(k[i] == std::expm1(w[i]));

  try {
    bench::bias_maps(c, 2, 0);
    FAIL("expected LookupError");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find("L0/H0, L0/H1, L1/H0, L1/H1") != std::string::npos);
  }
  CHECK_THROWS_AS(bench::bias_maps(c, 0, 2), LookupError);
  const Model s = tiny_model(Variant::Simple);
  try {
    bench::bias_maps(s, 0, std::nullopt);
    FAIL("expected LookupError");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find("available: none") != std::string::npos);
  }
}

TEST_CASE("matrix CSV keeps every bit and rejects ragged input") {
  Tensor m({2, 3}, {0.1, -1e-300, 1.0 / 3.0, 12345.678901234567, -0.0, 5e-324});
  const auto dir = scratch_dir("csv");
  fs::create_directories(dir);
  bench::write_matrix_csv(dir / "m.csv", m);
  const Tensor back = bench::read_matrix_csv(dir / "m.csv");
  REQUIRE(back.shape() == m.shape());
  for (std::size_t i = 0; i < m.numel(); ++i) {
    const double a = back[i], b = m[i];
    CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
  }
  {
    std::ofstream bad(dir / "r.csv");
    bad << "1,2\n3\n";
  }
  CHECK_THROWS_AS(bench::read_matrix_csv(dir / "r.csv"), ConfigError);
  CHECK_THROWS_AS(bench::read_matrix_csv(dir / "missing.csv"), IoError);
  CHECK(bench::parse_format("both") == bench::Format::Both);
  CHECK_THROWS_AS(bench::parse_format("png"), ConfigError);
}

TEST_CASE("PGM min-max normalization") {
  const auto dir = scratch_dir("pgm");
  fs::create_directories(dir);
  bench::write_pgm(dir / "g.pgm", Tensor({1, 3}, {2.0, 4.0, 3.0}));
  const auto p = bench::read_pgm(dir / "g.pgm");
  CHECK(p.width == 3);
  CHECK(p.height == 1);
  CHECK(p.pixels == std::vector<unsigned char>{0, 255, 128});
}
