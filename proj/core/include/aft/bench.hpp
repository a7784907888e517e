#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "aft/model.hpp"

namespace aft::bench {

/// Layer kinds the scaling benchmark knows: "simple", "full", "local",
/// "conv", and "attention" (the explicit per-channel attention oracle).
std::vector<std::string> scaling_variants();

struct ScalingConfig {
  std::vector<std::string> variants{"simple", "full", "local", "conv", "attention"};
  std::vector<std::size_t> lengths{256, 512, 1024, 2048};
  std::vector<std::size_t> widths{32};
  std::size_t trials = 3;        // timed trials after one discarded warmup
  std::size_t window = 32;       // local
  std::size_t factor_rank = 32;  // full/local use w = u v^T of this rank
  std::size_t kernel = 3;        // conv
  std::size_t heads = 4;         // conv
  bool causal = false;
  /// Rows whose largest expected buffer exceeds this many floats are skipped.
  std::size_t max_floats = std::size_t{1} << 25;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ScalingRow {
  std::string variant;
  std::size_t T = 0, d = 0, s = 0;
  double wall_ns = 0.0;         // median of the timed trials
  std::size_t peak_floats = 0;  // intermediates only: inputs, parameters and the output excluded
  std::size_t params = 0;
  bool skipped = false;
};

struct Slope {
  std::string variant;
  std::size_t d = 0;
  std::string metric;  // "time" or "memory"
  double slope = 0.0;  // least squares in log-log against T
  std::size_t points = 0;
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  std::vector<Slope> slopes;

  std::optional<double> slope(const std::string& variant, std::size_t d, const std::string& metric) const;
};

ScalingReport run_scaling(const ScalingConfig& cfg);

/// Least-squares slope of log(y) on log(x). Needs two distinct x values.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Grid used for conv rows: H is the largest divisor of T not above sqrt(T).
std::pair<std::size_t, std::size_t> conv_grid(std::size_t T);

inline constexpr const char* kRowHeader = "variant,T,d,s,wall_ns,peak_floats,params,status";
inline constexpr const char* kSlopeHeader = "variant,d,metric,slope,points";

void write_rows_csv(std::ostream& os, const std::vector<ScalingRow>& rows);
void write_slopes_csv(std::ostream& os, const std::vector<Slope>& slopes);

// ---- position bias export ----

enum class Format { Csv, Pgm, Both };
Format parse_format(const std::string& name);

struct BiasMap {
  std::size_t layer = 0, head = 0;
  Tensor values;  // 2-D
};

/// exp(w) with the model's causal mask (and window, for local) for full/local
/// layers, one map per layer; exp(w') - 1 per head for conv.
/// Throws LookupError listing the available maps when layer/head is absent.
std::vector<BiasMap> bias_maps(const Model& m, std::size_t layer, std::optional<std::size_t> head);

/// Writes bias_L{layer}_H{head}.csv/.pgm under `dir` and returns the paths.
std::vector<std::filesystem::path> export_bias(const Model& m, std::size_t layer, std::optional<std::size_t> head,
                                               Format fmt, const std::filesystem::path& dir);

void write_matrix_csv(const std::filesystem::path& path, const Tensor& m);
Tensor read_matrix_csv(const std::filesystem::path& path);
/// 8-bit P5 with maxval 255, min-max normalized; a constant map is all zeros.
void write_pgm(const std::filesystem::path& path, const Tensor& m);

struct Pgm {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> pixels;
};
Pgm read_pgm(const std::filesystem::path& path);

}  // namespace aft::bench
