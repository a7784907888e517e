#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <json.hpp>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>

#include "aft/bench.hpp"
#include "aft/checkpoint.hpp"
#include "aft/errors.hpp"
#include "aft/gradcheck_suite.hpp"
#include "aft/model.hpp"
#include "aft/tasks.hpp"
#include "aft/train.hpp"

namespace aft::cli {

namespace {

using json = nlohmann::json;

// Threshold for `gradcheck --all`.
constexpr double kGradcheckTolerance = 1e-5;

// ---- config file ----

struct FileConfig {
  json model = json::object();
  json train = json::object();
  json data = json::object();
  json bench = json::object();
  std::optional<std::uint64_t> seed;
};

FileConfig read_config(const std::string& path) {
  FileConfig fc;
  if (path.empty()) return fc;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") {
      if (!v.is_number_unsigned()) throw ConfigError("config seed must be a non-negative integer");
      fc.seed = v.get<std::uint64_t>();
      continue;
    }
    json* section = key == "model" ? &fc.model
                    : key == "train" ? &fc.train
                    : key == "data"  ? &fc.data
                    : key == "bench" ? &fc.bench
                                     : nullptr;
    if (!section) throw ConfigError("unknown config section '" + key + "' (seed, model, train, data, bench)");
    if (!v.is_object()) throw ConfigError("config section '" + key + "' must be an object");
    *section = v;
  }
  if (!fc.seed && fc.train.contains("seed")) fc.seed = fc.train["seed"].get<std::uint64_t>();
  return fc;
}

std::uint64_t parse_seed(const std::string& text, const char* what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text[0] == '-')
    throw ConfigError(std::string(what) + " is not a non-negative integer: '" + text + "'");
  return v;
}

// Options shared by every subcommand.
struct Common {
  std::string config;
  std::string seed_text;
  CLI::Option* seed = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON config file (sections: seed, model, train, data, bench)");
    seed = app->add_option("--seed", seed_text, "RNG seed (falls back to the config file, then AFT_SEED, then 0)");
  }

  // --seed, then the config file, then AFT_SEED, then `fallback`.
  std::uint64_t resolve_seed(const FileConfig& fc, std::uint64_t fallback = 0) const {
    if (seed->count()) return parse_seed(seed_text, "--seed");
    if (fc.seed) return *fc.seed;
    if (const char* env = std::getenv("AFT_SEED"); env && *env) return parse_seed(env, "AFT_SEED");
    return fallback;
  }
};

// Flag overrides applied on top of whatever the config file produced.
template <class Cfg>
struct Overrides {
  std::vector<std::function<void(Cfg&)>> apply;

  template <class T>
  void add(CLI::App* app, const std::string& name, T Cfg::*field, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(name, *value, help);
    apply.push_back([opt, value, field](Cfg& c) {
      if (opt->count()) c.*field = *value;
    });
  }

  void operator()(Cfg& c) const {
    for (const auto& f : apply) f(c);
  }
};

struct ModelFlags {
  Overrides<ModelConfig> o;
  std::string variant;
  CLI::Option* variant_opt = nullptr;
  bool hard_window = false;
  CLI::Option* hard_opt = nullptr;

  void attach(CLI::App* app) {
    variant_opt = app->add_option("--variant", variant, "full, local, simple or conv");
    o.add(app, "--layers", &ModelConfig::layers, "number of blocks");
    o.add(app, "--d", &ModelConfig::d, "model width");
    o.add(app, "--window", &ModelConfig::window, "local window s");
    hard_opt = app->add_flag("--hard-window", hard_window, "drop out-of-window context entirely (local)");
    o.add(app, "--factor-rank", &ModelConfig::factor_rank, "rank d' of w = u v^T, 0 for dense w");
    o.add(app, "--heads", &ModelConfig::heads, "conv heads");
    o.add(app, "--kernel", &ModelConfig::kernel, "conv kernel size");
    o.add(app, "--dropout", &ModelConfig::dropout, "dropout rate");
    o.add(app, "--max-len", &ModelConfig::max_len, "longest sequence the model supports");
  }

  ModelConfig resolve(ModelConfig base, const FileConfig& fc) const {
    ModelConfig c = model_config_from_json(fc.model.dump(), base);
    if (variant_opt->count()) c.variant = parse_variant(variant);
    if (hard_opt->count()) c.hard_window = hard_window;
    o(c);
    c.validate();
    return c;
  }
};

struct TrainFlags {
  Overrides<TrainConfig> o;
  std::string schedule;
  CLI::Option* schedule_opt = nullptr;
  CLI::Option* warmup_opt = nullptr;

  void attach(CLI::App* app) {
    o.add(app, "--steps", &TrainConfig::total_steps, "optimizer steps");
    o.add(app, "--lr", &TrainConfig::peak_lr, "peak learning rate");
    o.add(app, "--batch", &TrainConfig::batch, "sequences per batch");
    warmup_opt = app->add_option("--warmup", warmup_, "linear warmup steps");
    o.add(app, "--weight-decay", &TrainConfig::weight_decay, "decoupled weight decay");
    o.add(app, "--eval-every", &TrainConfig::eval_every, "steps between evaluations");
    o.add(app, "--eval-batches", &TrainConfig::eval_batches, "held-out batches per evaluation");
    o.add(app, "--target-accuracy", &TrainConfig::target_accuracy, "copy task: stop above this exact-match rate");
    o.add(app, "--clip", &TrainConfig::grad_clip, "global gradient norm clip, 0 disables");
    schedule_opt = app->add_option("--schedule", schedule, "cosine or inverse_sqrt");
    o.add(app, "--metrics", &TrainConfig::metrics_path, "write the metrics CSV here");
    o.add(app, "--checkpoint", &TrainConfig::checkpoint_dir, "write a checkpoint directory here");
  }

  TrainConfig resolve(const FileConfig& fc, std::uint64_t seed) const {
    TrainConfig c = train_config_from_json(fc.train.dump());
    o(c);
    if (schedule_opt->count()) c = train_config_from_json(json{{"schedule", schedule}}.dump(), c);
    if (warmup_opt->count()) c.warmup_steps = warmup_;
    // a short run with the default warmup is shortened rather than rejected
    else if (!fc.train.contains("warmup_steps") && c.warmup_steps > c.total_steps) c.warmup_steps = c.total_steps;
    c.seed = seed;
    c.validate();
    return c;
  }

 private:
  std::size_t warmup_ = 0;
};

struct DataConfig {
  std::string task = "copy";
  std::string corpus;
  std::size_t synthetic_bytes = 512 * 1024;
  std::size_t seq_len = 128;
  std::size_t copy_length = 32;
};

struct DataFlags {
  Overrides<DataConfig> o;

  void attach(CLI::App* app, bool with_task) {
    if (with_task) o.add(app, "--task", &DataConfig::task, "copy or lm");
    o.add(app, "--corpus", &DataConfig::corpus, "text file for the character model (default: synthetic)");
    o.add(app, "--synthetic-bytes", &DataConfig::synthetic_bytes, "size of the generated corpus");
    o.add(app, "--seq-len", &DataConfig::seq_len, "character model context length");
    o.add(app, "--copy-length", &DataConfig::copy_length, "copy task sequence length");
  }

  DataConfig resolve(const FileConfig& fc, DataConfig base = {}) const {
    DataConfig d = base;
    for (const auto& [key, v] : fc.data.items()) {
      if (key == "task") d.task = v.get<std::string>();
      else if (key == "corpus") d.corpus = v.get<std::string>();
      else if (key == "synthetic_bytes") d.synthetic_bytes = v.get<std::size_t>();
      else if (key == "seq_len") d.seq_len = v.get<std::size_t>();
      else if (key == "copy_length") d.copy_length = v.get<std::size_t>();
      else throw ConfigError("unknown data key '" + key + "'");
    }
    o(d);
    if (d.task != "copy" && d.task != "lm") throw ConfigError("unknown task '" + d.task + "' (copy or lm)");
    return d;
  }
};

std::vector<std::uint8_t> corpus_for(const DataConfig& d, std::uint64_t seed) {
  if (!d.corpus.empty()) return load_corpus(d.corpus);
  return synthetic_corpus(seed, d.synthetic_bytes);
}

json arm_json(const AblationArm& a) {
  return {{"name", a.name},
          {"bias_params", a.bias_params},
          {"final_train_loss", a.final_train_loss},
          {"final_eval_loss", a.final_eval_loss},
          {"final_eval_bpc", a.final_eval_bpc}};
}

void print_json(std::ostream& out, const json& j) { out << j.dump(2) << '\n'; }

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::scientific << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention free transformer layers: training, evaluation, benchmarks, gradient checks"};
  app.name("aft");
  app.require_subcommand(1);

  // -- train
  auto* train = app.add_subcommand("train", "train on the copy task or a character corpus");
  Common train_common;
  ModelFlags train_model;
  TrainFlags train_flags;
  DataFlags train_data;
  train_common.attach(train);
  train_model.attach(train);
  train_flags.attach(train);
  train_data.attach(train, true);

  // -- eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  Common eval_common;
  DataFlags eval_data;
  std::string eval_ckpt;
  std::size_t eval_batch = 16, eval_batches = 4;
  eval_common.attach(eval);
  eval_data.attach(eval, true);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--batch", eval_batch, "sequences per batch");
  eval->add_option("--batches", eval_batches, "number of held-out batches");

  // -- bench
  auto* bench = app.add_subcommand("bench", "layer scaling benchmark (CSV on stdout)");
  Common bench_common;
  Overrides<bench::ScalingConfig> bench_flags;
  std::string slopes_path;
  bool bench_causal = false;
  bench_common.attach(bench);
  {
    auto variants = std::make_shared<std::vector<std::string>>();
    auto* v = bench->add_option("--variants", *variants, "comma list of simple, full, local, conv, attention")
                  ->delimiter(',');
    auto lengths = std::make_shared<std::vector<std::size_t>>();
    auto* t = bench->add_option("--T", *lengths, "comma list of sequence lengths")->delimiter(',');
    auto widths = std::make_shared<std::vector<std::size_t>>();
    auto* d = bench->add_option("--d", *widths, "comma list of widths")->delimiter(',');
    bench_flags.apply.push_back([=](bench::ScalingConfig& c) {
      if (v->count()) c.variants = *variants;
      if (t->count()) c.lengths = *lengths;
      if (d->count()) c.widths = *widths;
    });
  }
  bench_flags.add(bench, "--trials", &bench::ScalingConfig::trials, "timed trials per row (>= 3)");
  bench_flags.add(bench, "--window", &bench::ScalingConfig::window, "local window s");
  bench_flags.add(bench, "--rank", &bench::ScalingConfig::factor_rank, "rank of the full/local position bias");
  bench_flags.add(bench, "--kernel", &bench::ScalingConfig::kernel, "conv kernel size");
  bench_flags.add(bench, "--heads", &bench::ScalingConfig::heads, "conv heads");
  bench_flags.add(bench, "--max-floats", &bench::ScalingConfig::max_floats, "skip rows needing more floats");
  auto* causal_opt = bench->add_flag("--causal", bench_causal, "causal layers");
  bench->add_option("--slopes", slopes_path, "write the log-log slope CSV here (default: stderr)");

  // -- gradcheck
  auto* grad = app.add_subcommand("gradcheck", "analytic vs. finite-difference gradients");
  Common grad_common;
  bool grad_all = false;
  grad_common.attach(grad);
  grad->add_flag("--all", grad_all, "run every op over the small-shape grid")->required();

  // -- export-bias
  auto* xb = app.add_subcommand("export-bias", "write learned position-bias maps as CSV/PGM");
  Common exp_common;
  std::string exp_ckpt, exp_format = "both", exp_out = ".";
  std::size_t exp_layer = 0, exp_head = 0;
  exp_common.attach(xb);
  xb->add_option("--checkpoint", exp_ckpt, "checkpoint directory")->required();
  xb->add_option("--layer", exp_layer, "block index")->required();
  auto* head_opt = xb->add_option("--head", exp_head, "head index (conv); all heads when omitted");
  xb->add_option("--format", exp_format, "csv, pgm or both");
  xb->add_option("--out", exp_out, "output directory");

  // -- ablate-factorization
  auto* abl = app.add_subcommand("ablate-factorization", "dense vs. factorized position bias on a character corpus");
  Common abl_common;
  ModelFlags abl_model;
  TrainFlags abl_train;
  DataFlags abl_data;
  std::size_t abl_rank = 32;
  abl_common.attach(abl);
  abl_model.attach(abl);
  abl_train.attach(abl);
  abl_data.attach(abl, false);
  abl->add_option("--rank", abl_rank, "rank d' of the factorized arm");

  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
    const bool known = std::any_of(subs.begin(), subs.end(), [&](const CLI::App* s) { return s->get_name() == args[0]; });
    if (!known) {
      err << "error: unknown subcommand '" << args[0] << "'\n\n" << app.help();
      return kExitConfig;
    }
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (*train) {
      const FileConfig fc = read_config(train_common.config);
      const std::uint64_t seed = train_common.resolve_seed(fc);
      const DataConfig data = train_data.resolve(fc);
      ModelConfig base;
      if (data.task == "copy") {
        base.vocab = CopyTask{}.vocab;
        base.max_len = data.copy_length;
      } else {
        base.max_len = data.seq_len;
      }
      const ModelConfig mcfg = train_model.resolve(base, fc);
      const TrainConfig tcfg = train_flags.resolve(fc, seed);
      json summary{{"task", data.task}, {"seed", seed}, {"model", json::parse(to_json(mcfg))}};
      TrainResult r;
      if (data.task == "copy") {
        r = train_copy_task(mcfg, tcfg, CopyTask{data.copy_length, mcfg.vocab});
        summary["token_accuracy"] = r.accuracy.token;
        summary["sequence_accuracy"] = r.accuracy.sequence;
      } else {
        const auto corpus = corpus_for(data, seed);
        r = train_char_lm(corpus, mcfg, tcfg, data.seq_len);
        summary["final_eval_bpc"] = r.final_eval_bpc;
      }
      summary["steps_run"] = r.steps_run;
      summary["initial_eval_loss"] = r.initial_eval_loss;
      summary["final_eval_loss"] = r.final_eval_loss;
      if (!tcfg.metrics_path.empty()) summary["metrics"] = tcfg.metrics_path;
      if (!tcfg.checkpoint_dir.empty()) summary["checkpoint"] = tcfg.checkpoint_dir;
      print_json(out, summary);
      return kExitOk;
    }

    if (*eval) {
      const FileConfig fc = read_config(eval_common.config);
      const LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
      const std::uint64_t seed = eval_common.resolve_seed(fc, ck.meta.seed);
      DataConfig base;
      base.task = ck.model.cfg.vocab == 256 ? "lm" : "copy";
      base.seq_len = ck.model.cfg.max_len;
      base.copy_length = std::min<std::size_t>(32, ck.model.cfg.max_len);
      const DataConfig data = eval_data.resolve(fc, base);
      if (eval_batch == 0 || eval_batches == 0) throw ConfigError("--batch and --batches must be positive");
      json result{{"checkpoint", eval_ckpt}, {"task", data.task}, {"step", ck.meta.step}, {"seed", seed}};
      if (data.task == "copy") {
        const CopyTask task{data.copy_length, ck.model.cfg.vocab};
        task.validate();
        Rng rng = Rng(seed).derive(4);
        std::vector<Batch> batches;
        CopyAccuracy acc;
        for (std::size_t i = 0; i < eval_batches; ++i) {
          batches.push_back(copy_batch(task, rng, eval_batch));
          const CopyAccuracy a = copy_accuracy(ck.model, batches.back());
          acc.token += a.token / static_cast<double>(eval_batches);
          acc.sequence += a.sequence / static_cast<double>(eval_batches);
        }
        result["loss"] = eval_lm_loss(ck.model, batches);
        result["token_accuracy"] = acc.token;
        result["sequence_accuracy"] = acc.sequence;
      } else {
        if (ck.model.cfg.vocab != 256) throw ConfigError("the lm task needs a byte-level (vocab 256) checkpoint");
        const auto corpus = corpus_for(data, seed);
        const std::size_t split = corpus.size() - corpus.size() / 10;
        const std::span<const std::uint8_t> held(corpus.data() + split, corpus.size() - split);
        if (data.seq_len == 0 || data.seq_len > ck.model.cfg.max_len || held.size() <= data.seq_len)
          throw ConfigError("seq_len must be in [1, max_len] and shorter than the held-out tail");
        const double loss = eval_lm_loss(ck.model, lm_eval_batches(held, eval_batch, data.seq_len, eval_batches));
        result["loss"] = loss;
        result["bpc"] = loss / std::numbers::ln2;
      }
      print_json(out, result);
      return kExitOk;
    }

    if (*bench) {
      const FileConfig fc = read_config(bench_common.config);
      bench::ScalingConfig cfg;
      for (const auto& [key, v] : fc.bench.items()) {
        if (key == "variants") cfg.variants = v.get<std::vector<std::string>>();
        else if (key == "T") cfg.lengths = v.get<std::vector<std::size_t>>();
        else if (key == "d") cfg.widths = v.get<std::vector<std::size_t>>();
        else if (key == "trials") cfg.trials = v.get<std::size_t>();
        else if (key == "window") cfg.window = v.get<std::size_t>();
        else if (key == "rank") cfg.factor_rank = v.get<std::size_t>();
        else if (key == "kernel") cfg.kernel = v.get<std::size_t>();
        else if (key == "heads") cfg.heads = v.get<std::size_t>();
        else if (key == "causal") cfg.causal = v.get<bool>();
        else if (key == "max_floats") cfg.max_floats = v.get<std::size_t>();
        else throw ConfigError("unknown bench key '" + key + "'");
      }
      bench_flags(cfg);
      if (causal_opt->count()) cfg.causal = bench_causal;
      cfg.seed = bench_common.resolve_seed(fc);
      const auto report = bench::run_scaling(cfg);
      bench::write_rows_csv(out, report.rows);
      if (slopes_path.empty()) {
        bench::write_slopes_csv(err, report.slopes);
      } else {
        std::ofstream s(slopes_path);
        if (!s) throw IoError("cannot write " + slopes_path);
        bench::write_slopes_csv(s, report.slopes);
      }
      return kExitOk;
    }

    if (*grad) {
      const FileConfig fc = read_config(grad_common.config);
      const std::uint64_t seed = grad_common.resolve_seed(fc);
      const auto rows = gradcheck::run_suite(seed);
      bool ok = true;
      out << std::left << std::setw(24) << "op" << std::right << std::setw(7) << "cases" << std::setw(9) << "entries"
          << std::setw(12) << "max_rel" << std::setw(12) << "max_abs" << std::setw(8) << "over" << std::setw(10)
          << "non-fp" << '\n';
      for (const auto& r : rows) {
        const auto b = gradcheck::breakdown(r, kGradcheckTolerance);
        const bool pass = r.max_rel <= kGradcheckTolerance;
        ok = ok && pass;
        out << std::left << std::setw(24) << r.op << std::right << std::setw(7) << r.cases << std::setw(9)
            << r.entries << std::setw(12) << fixed(r.max_rel, 2) << std::setw(12) << fixed(r.max_abs, 2)
            << std::setw(8) << b.over << std::setw(10) << b.over_roundoff << (pass ? "" : "  FAIL") << '\n';
      }
      out << "seed " << seed << ", tolerance " << fixed(kGradcheckTolerance, 0) << " relative; 'over' counts entries above"
          << " it, 'non-fp' those whose absolute error exceeds the " << fixed(gradcheck::kRoundoffBound, 0)
          << " round-off bound of h = 1e-5 differences\n";
      return ok ? kExitOk : kExitNumeric;
    }

    if (*xb) {
      const LoadedCheckpoint ck = load_checkpoint(exp_ckpt);
      std::optional<std::size_t> head;
      if (head_opt->count()) head = exp_head;
      const auto files = bench::export_bias(ck.model, exp_layer, head, bench::parse_format(exp_format), exp_out);
      for (const auto& f : files) out << f.string() << '\n';
      return kExitOk;
    }

    if (*abl) {
      const FileConfig fc = read_config(abl_common.config);
      const std::uint64_t seed = abl_common.resolve_seed(fc);
      DataConfig dbase;
      dbase.task = "lm";
      dbase.seq_len = 512;
      const DataConfig data = abl_data.resolve(fc, dbase);
      ModelConfig base;
      base.variant = Variant::Full;
      base.max_len = data.seq_len;
      const ModelConfig mcfg = abl_model.resolve(base, fc);
      const TrainConfig tcfg = abl_train.resolve(fc, seed);
      const auto corpus = corpus_for(data, seed);
      const AblationReport rep = ablate_factorization(corpus, mcfg, tcfg, data.seq_len, abl_rank);
      print_json(out, {{"seed", seed},
                       {"seq_len", data.seq_len},
                       {"rank", abl_rank},
                       {"param_ratio", rep.param_ratio},
                       {"bpc_gap", rep.factorized.final_eval_bpc - rep.dense.final_eval_bpc},
                       {"dense", arm_json(rep.dense)},
                       {"factorized", arm_json(rep.factorized)}});
      return kExitOk;
    }
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const json::exception& e) {
    err << "error: bad config value: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return kExitConfig;
}

}  // namespace aft::cli
