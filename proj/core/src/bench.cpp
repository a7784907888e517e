#include "aft/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <new>

#include "aft/aft_layers.hpp"
#include "aft/errors.hpp"
#include "aft/memory.hpp"
#include "aft/reference_oracle.hpp"

namespace aft::bench {

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Everything a row needs, built before the memory probe starts so inputs and
// parameters never count as intermediates.
struct Case {
  std::string variant;
  Tensor x;
  AftFullParams full;
  AftConvParams conv;
  std::size_t s = 0;
  std::size_t params = 0;
};

std::size_t projection_count(std::size_t d) { return 4 * d * d; }

Case make_case(const ScalingConfig& cfg, const std::string& variant, std::size_t T, std::size_t d, Rng& rng) {
  Case c;
  c.variant = variant;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  if (variant == "conv") {
    const auto [H, W] = conv_grid(T);
    c.s = cfg.kernel;
    c.conv = init_conv_params(rng, d, cfg.heads, cfg.kernel, proj_std, 0.1);
    c.x = randn(rng, {H, W, d});
    c.params = c.conv.wq.numel() + c.conv.wk.numel() + c.conv.wv.numel() + c.conv.w_raw.numel() +
               c.conv.gamma.numel() + c.conv.beta.numel();
    return c;
  }
  c.x = randn(rng, {T, d});
  c.full.proj = init_projections(rng, d, proj_std);
  c.params = projection_count(d);
  if (variant != "simple") {
    c.full.bias = init_factorized_bias(rng, T, std::min(cfg.factor_rank, T), 0.1);
    c.params += c.full.bias.parameter_count();
  }
  if (variant == "local") c.s = std::min(cfg.window, T);
  return c;
}

Tensor forward(const Case& c, const ScalingConfig& cfg) {
  const LayerMode mode{.causal = cfg.causal};
  if (c.variant == "simple") return aft_simple_forward(c.x, c.full.proj, mode, false).y;
  if (c.variant == "full") return aft_full_forward(c.x, c.full, mode, false).y;
  if (c.variant == "local") return aft_local_forward(c.x, c.full, c.s, mode, false).y;
  if (c.variant == "conv") return aft_conv_forward(c.x, c.conv, false).y;
  return oracle::aft_via_attention(c.x, c.full, mode);
}

// Largest single buffer a row is expected to need, for the skip budget.
std::size_t expected_floats(const std::string& variant, std::size_t T, std::size_t d) {
  if (variant == "attention") return d * T * T;
  return 8 * T * d;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ScalingRow measure(const ScalingConfig& cfg, const std::string& variant, std::size_t T, std::size_t d, Rng& rng) {
  ScalingRow row{variant, T, d};
  if (expected_floats(variant, T, d) > cfg.max_floats) {
    row.skipped = true;
    return row;
  }
  try {
    const Case c = make_case(cfg, variant, T, d, rng);
    row.s = c.s;
    row.params = c.params;
    {
      MemoryProbe probe;
      const Tensor y = forward(c, cfg);
      row.peak_floats = probe.peak_above_baseline() - y.numel();
    }
    std::vector<double> times;
    double sink = 0.0;
    for (std::size_t k = 0; k <= cfg.trials; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor y = forward(c, cfg);
      const auto t1 = std::chrono::steady_clock::now();
      sink += y[0];
      if (k > 0) times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
    row.wall_ns = median(times);
    if (!std::isfinite(sink)) throw NumericError("non-finite output in " + variant + " forward");
  } catch (const std::bad_alloc&) {
    row = ScalingRow{variant, T, d};
    row.skipped = true;
  }
  return row;
}

}  // namespace

std::vector<std::string> scaling_variants() { return {"simple", "full", "local", "conv", "attention"}; }

void ScalingConfig::validate() const {
  if (variants.empty() || lengths.empty() || widths.empty())
    throw ConfigError("bench needs at least one variant, one T and one d");
  const auto known = scaling_variants();
  for (const auto& v : variants)
    if (std::find(known.begin(), known.end(), v) == known.end())
      throw ConfigError("unknown bench variant '" + v + "' (simple, full, local, conv, attention)");
  if (trials < 3) throw ConfigError("bench needs at least 3 trials");
  for (auto T : lengths)
    if (T == 0) throw ConfigError("T must be positive");
  for (auto d : widths) {
    if (d == 0) throw ConfigError("d must be positive");
    if (std::find(variants.begin(), variants.end(), "conv") != variants.end() && d % heads != 0)
      throw ConfigError("conv heads must divide d");
  }
  if (kernel % 2 == 0) throw ConfigError("conv kernel must be odd");
  if (factor_rank == 0) throw ConfigError("factor_rank must be positive");
}

std::pair<std::size_t, std::size_t> conv_grid(std::size_t T) {
  std::size_t h = 1;
  for (std::size_t i = 1; i * i <= T; ++i)
    if (T % i == 0) h = i;
  return {h, T / h};
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw UsageError("slope fit needs at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw UsageError("slope fit needs two distinct x values");
  return sxy / sxx;
}

ScalingReport run_scaling(const ScalingConfig& cfg) {
  cfg.validate();
  ScalingReport report;
  Rng root(cfg.seed);
  std::uint64_t stream = 0;
  for (const auto& v : cfg.variants)
    for (auto d : cfg.widths)
      for (auto T : cfg.lengths) {
        Rng rng = root.derive(++stream);
        report.rows.push_back(measure(cfg, v, T, d, rng));
      }

  for (const auto& v : cfg.variants)
    for (auto d : cfg.widths)
      for (const char* metric : {"time", "memory"}) {
        std::vector<double> xs, ys;
        for (const auto& r : report.rows) {
          if (r.variant != v || r.d != d || r.skipped) continue;
          const double y = metric[0] == 't' ? r.wall_ns : static_cast<double>(r.peak_floats);
          if (y <= 0.0) continue;
          xs.push_back(static_cast<double>(r.T));
          ys.push_back(y);
        }
        const bool distinct = std::adjacent_find(xs.begin(), xs.end(), std::not_equal_to<>()) != xs.end();
        if (xs.size() >= 2 && distinct) report.slopes.push_back({v, d, metric, loglog_slope(xs, ys), xs.size()});
      }
  return report;
}

std::optional<double> ScalingReport::slope(const std::string& variant, std::size_t d,
                                           const std::string& metric) const {
  for (const auto& s : slopes)
    if (s.variant == variant && s.d == d && s.metric == metric) return s.slope;
  return std::nullopt;
}

void write_rows_csv(std::ostream& os, const std::vector<ScalingRow>& rows) {
  os << kRowHeader << '\n';
  for (const auto& r : rows)
    os << r.variant << ',' << std::to_string(r.T) << ',' << std::to_string(r.d) << ',' << std::to_string(r.s) << ','
       << (r.skipped ? "" : fmt(r.wall_ns)) << ','
       << (r.skipped ? "" : std::to_string(r.peak_floats)) << ',' << (r.skipped ? "" : std::to_string(r.params))
       << ',' << (r.skipped ? "skipped" : "ok") << '\n';
}

void write_slopes_csv(std::ostream& os, const std::vector<Slope>& slopes) {
  os << kSlopeHeader << '\n';
  for (const auto& s : slopes)
    os << s.variant << ',' << std::to_string(s.d) << ',' << s.metric << ',' << fmt(s.slope) << ','
       << std::to_string(s.points) << '\n';
}

// ---- bias export ----

Format parse_format(const std::string& name) {
  if (name == "csv") return Format::Csv;
  if (name == "pgm") return Format::Pgm;
  if (name == "both") return Format::Both;
  throw ConfigError("unknown export format '" + name + "' (csv, pgm, both)");
}

namespace {

std::string map_name(std::size_t layer, std::size_t head) {
  return "L" + std::to_string(layer) + "/H" + std::to_string(head);
}

std::vector<BiasMap> all_maps(const Model& m) {
  std::vector<BiasMap> out;
  const auto& cfg = m.cfg;
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& b = m.blocks[l];
    if (cfg.variant == Variant::Full || cfg.variant == Variant::Local) {
      const std::size_t T = b.attn.bias.rows();
      const LayerMode mode{.causal = true, .hard_window = cfg.hard_window};
      std::optional<std::size_t> window;
      if (cfg.variant == Variant::Local) window = std::min(cfg.window, T);
      out.push_back({l, 0, exp(materialize_bias(b.attn.bias, T, mode, window))});
    } else if (cfg.variant == Variant::Conv) {
      const Tensor w = reparameterize_bias(b.conv.w_raw, b.conv.gamma, b.conv.beta);
      const std::size_t s = b.conv.kernel;
      for (std::size_t h = 0; h < b.conv.heads; ++h) {
        Tensor k({s, s});
        for (std::size_t i = 0; i < s * s; ++i) k[i] = std::expm1(w[h * s * s + i]);
        out.push_back({l, h, std::move(k)});
      }
    }
  }
  return out;
}

}  // namespace

std::vector<BiasMap> bias_maps(const Model& m, std::size_t layer, std::optional<std::size_t> head) {
  auto maps = all_maps(m);
  std::vector<BiasMap> picked;
  for (auto& bm : maps)
    if (bm.layer == layer && (!head || bm.head == *head)) picked.push_back(bm);
  if (!picked.empty()) return picked;
  std::string names;
  for (const auto& bm : maps) names += (names.empty() ? "" : ", ") + map_name(bm.layer, bm.head);
  std::string want = "L" + std::to_string(layer) + (head ? "/H" + std::to_string(*head) : "");
  throw LookupError("no position bias " + want + " in this " + std::string(to_string(m.cfg.variant)) +
                    " model; available: " + (names.empty() ? "none" : names));
}

std::vector<std::filesystem::path> export_bias(const Model& m, std::size_t layer, std::optional<std::size_t> head,
                                               Format fmt, const std::filesystem::path& dir) {
  const auto maps = bias_maps(m, layer, head);
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& bm : maps) {
    const std::string stem = "bias_L" + std::to_string(bm.layer) + "_H" + std::to_string(bm.head);
    if (fmt != Format::Pgm) {
      written.push_back(dir / (stem + ".csv"));
      write_matrix_csv(written.back(), bm.values);
    }
    if (fmt != Format::Csv) {
      written.push_back(dir / (stem + ".pgm"));
      write_pgm(written.back(), bm.values);
    }
  }
  return written;
}

void write_matrix_csv(const std::filesystem::path& path, const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("matrix export needs a 2-D tensor, got " + to_string(m.shape()));
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out << (j ? "," : "") << fmt(m[i * cols + j]);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t n = 0;
    const char* p = line.data();
    const char* end = p + line.size();
    while (true) {
      double v;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) throw ConfigError("bad number in " + path.string() + " row " + std::to_string(rows + 1));
      values.push_back(v);
      ++n;
      if (next == end) break;
      if (*next != ',') throw ConfigError("bad separator in " + path.string());
      p = next + 1;
    }
    if (rows == 0) cols = n;
    else if (n != cols) throw ConfigError("ragged rows in " + path.string());
    ++rows;
  }
  if (rows == 0) throw ConfigError("empty matrix file " + path.string());
  return Tensor({rows, cols}, values);
}

void write_pgm(const std::filesystem::path& path, const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("PGM export needs a 2-D tensor, got " + to_string(m.shape()));
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
  const double range = *hi - *lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  for (std::size_t i = 0; i < m.numel(); ++i) {
    const double t = range > 0.0 ? (m[i] - *lo) / range : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Pgm read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic;
  Pgm p;
  int maxval = 0;
  in >> magic >> p.width >> p.height >> maxval;
  if (magic != "P5" || maxval != 255 || !in) throw ConfigError("not an 8-bit P5 file: " + path.string());
  in.get();
  p.pixels.resize(p.width * p.height);
  in.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(p.pixels.size())) throw ConfigError("truncated PGM " + path.string());
  return p;
}

}  // namespace aft::bench
