#include "aft/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>

#include "aft/checkpoint.hpp"
#include "aft/errors.hpp"

namespace aft {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(peak_lr >= 0.0)) throw ConfigError("peak_lr must be non-negative");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (eval_batches == 0) throw ConfigError("eval_batches must be positive");
  if (target_accuracy < 0.0 || target_accuracy > 1.0) throw ConfigError("target_accuracy must be in [0, 1]");
}

std::string to_json(const TrainConfig& c) {
  json j{{"peak_lr", c.peak_lr},
         {"weight_decay", c.weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"warmup_steps", c.warmup_steps},
         {"total_steps", c.total_steps},
         {"batch", c.batch},
         {"seed", c.seed},
         {"schedule", c.schedule == Schedule::Cosine ? "cosine" : "inverse_sqrt"},
         {"grad_clip", c.grad_clip},
         {"eval_every", c.eval_every},
         {"eval_batches", c.eval_batches},
         {"target_accuracy", c.target_accuracy},
         {"metrics_path", c.metrics_path},
         {"checkpoint_dir", c.checkpoint_dir}};
  return j.dump();
}

TrainConfig train_config_from_json(std::string_view text, const TrainConfig& base) {
  TrainConfig c = base;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "peak_lr") c.peak_lr = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "warmup_steps") c.warmup_steps = v.get<std::size_t>();
      else if (key == "total_steps") c.total_steps = v.get<std::size_t>();
      else if (key == "batch") c.batch = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "schedule") {
        const auto s = v.get<std::string>();
        if (s == "cosine") c.schedule = Schedule::Cosine;
        else if (s == "inverse_sqrt") c.schedule = Schedule::InverseSqrt;
        else throw ConfigError("unknown schedule '" + s + "' (expected cosine or inverse_sqrt)");
      } else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "eval_every") c.eval_every = v.get<std::size_t>();
      else if (key == "eval_batches") c.eval_batches = v.get<std::size_t>();
      else if (key == "target_accuracy") c.target_accuracy = v.get<double>();
      else if (key == "metrics_path") c.metrics_path = v.get<std::string>();
      else if (key == "checkpoint_dir") c.checkpoint_dir = v.get<std::string>();
      else throw ConfigError("unknown train config key '" + key + "'");
    }
  } catch (const json::type_error& e) {
    throw ConfigError(std::string("train config has a value of the wrong type: ") + e.what());
  }
  return c;
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  const double peak = cfg.peak_lr;
  const auto s = static_cast<double>(step);
  const auto warm = static_cast<double>(cfg.warmup_steps);
  if (step <= cfg.warmup_steps) return cfg.warmup_steps == 0 ? peak : peak * s / warm;
  if (cfg.schedule == Schedule::InverseSqrt) return peak * std::sqrt(std::max(warm, 1.0) / s);
  if (step >= cfg.total_steps) return 0.0;
  const double frac = (s - warm) / (static_cast<double>(cfg.total_steps) - warm);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamWState adamw_init(const std::vector<ParamRef>& params) {
  AdamWState s;
  for (const auto& p : params) {
    s.m.push_back(Tensor::zeros_like(*p.value));
    s.v.push_back(Tensor::zeros_like(*p.value));
  }
  return s;
}

void adamw_step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads, AdamWState& state, double lr,
                const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adamw_step: parameter, gradient and state counts differ");
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& theta = *params[k].value;
    const Tensor& g = *grads[k].value;
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    if (g.shape() != theta.shape() || m.shape() != theta.shape())
      throw DimensionError("adamw_step: shape mismatch for " + params[k].name);
    const double decay = params[k].decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + decay * theta[i]);
    }
  }
}

double clip_grad_norm(const std::vector<ParamRef>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.value->data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& g : grads) g.value->scale_inplace(f);
  }
  return norm;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics log '" + path.string() + "'");
  out.imbue(std::locale::classic());
  out << kMetricsHeader << '\n';
  out.precision(17);
  for (const auto& r : rows)
    out << r.step << ',' << r.split << ',' << r.loss << ',' << r.bpc << ',' << r.lr << ',' << r.wall_ms << '\n';
  if (!out) throw IoError("error writing metrics log '" + path.string() + "'");
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double mean_loss(const Model& m, const std::vector<Batch>& batches) {
  double total = 0.0;
  for (const auto& b : batches) total += model_loss(m, b, nullptr, nullptr);
  return total / static_cast<double>(batches.size());
}

CopyAccuracy mean_accuracy(const Model& m, const std::vector<Batch>& batches) {
  CopyAccuracy acc;
  for (const auto& b : batches) {
    const auto a = copy_accuracy(m, b);
    acc.token += a.token;
    acc.sequence += a.sequence;
  }
  acc.token /= static_cast<double>(batches.size());
  acc.sequence /= static_cast<double>(batches.size());
  return acc;
}

// Shared loop. next_batch draws training data; evaluate returns the eval loss
// and may decide to stop early.
template <class NextBatch, class Evaluate>
TrainResult run_training(const ModelConfig& mcfg, const TrainConfig& tcfg, NextBatch next_batch, Evaluate evaluate) {
  tcfg.validate();
  mcfg.validate();
  Rng root(tcfg.seed);
  Rng init_rng = root.derive(1);
  Rng drop_rng = root.derive(3);

  TrainResult r;
  r.model = init_model(mcfg, init_rng);
  auto params = r.model.parameters();
  AdamWState state = adamw_init(params);
  Rng* dropout = mcfg.dropout > 0.0 ? &drop_rng : nullptr;
  const auto t0 = Clock::now();

  bool stop = false;
  r.initial_eval_loss = evaluate(r.model, r, stop);
  r.log.push_back({0, "eval", r.initial_eval_loss, r.initial_eval_loss / std::numbers::ln2, 0.0, ms_since(t0)});
  r.final_eval_loss = r.initial_eval_loss;

  Model grads;
  for (std::size_t step = 1; step <= tcfg.total_steps && !stop; ++step) {
    const double lr = lr_at(step, tcfg);
    const Batch b = next_batch();
    const double loss = model_loss(r.model, b, dropout, &grads);
    auto gparams = grads.parameters();
    if (tcfg.grad_clip > 0.0) clip_grad_norm(gparams, tcfg.grad_clip);
    adamw_step(params, gparams, state, lr, tcfg);
    r.train_loss.push_back(loss);
    r.steps_run = step;
    r.log.push_back({step, "train", loss, loss / std::numbers::ln2, lr, ms_since(t0)});
    if (step % tcfg.eval_every == 0 || step == tcfg.total_steps) {
      r.final_eval_loss = evaluate(r.model, r, stop);
      r.log.push_back({step, "eval", r.final_eval_loss, r.final_eval_loss / std::numbers::ln2, lr, ms_since(t0)});
    }
  }
  if (r.log.back().split != "eval") {
    r.final_eval_loss = evaluate(r.model, r, stop);
    r.log.push_back({r.steps_run, "eval", r.final_eval_loss, r.final_eval_loss / std::numbers::ln2,
                     lr_at(std::max<std::size_t>(r.steps_run, 1), tcfg), ms_since(t0)});
  }
  r.final_eval_bpc = r.final_eval_loss / std::numbers::ln2;
  if (!tcfg.metrics_path.empty()) write_metrics_csv(tcfg.metrics_path, r.log);
  if (!tcfg.checkpoint_dir.empty()) save_checkpoint(tcfg.checkpoint_dir, r.model, {tcfg.seed, r.steps_run});
  return r;
}

}  // namespace

TrainResult train_copy_task(const ModelConfig& mcfg, const TrainConfig& tcfg, const CopyTask& task) {
  task.validate();
  if (mcfg.vocab != task.vocab) throw ConfigError("copy task vocab and model vocab differ");
  if (mcfg.max_len < task.length) throw ConfigError("model max_len shorter than the copy task length");
  Rng root(tcfg.seed);
  Rng data_rng = root.derive(2);
  Rng eval_rng = root.derive(4);
  std::vector<Batch> eval_set;
  for (std::size_t i = 0; i < tcfg.eval_batches; ++i) eval_set.push_back(copy_batch(task, eval_rng, tcfg.batch));

  return run_training(
      mcfg, tcfg, [&] { return copy_batch(task, data_rng, tcfg.batch); },
      [&](const Model& m, TrainResult& r, bool& stop) {
        r.accuracy = mean_accuracy(m, eval_set);
        if (tcfg.target_accuracy > 0.0 && r.accuracy.sequence > tcfg.target_accuracy) stop = true;
        return mean_loss(m, eval_set);
      });
}

double eval_lm_loss(const Model& m, const std::vector<Batch>& batches) { return mean_loss(m, batches); }

TrainResult train_char_lm(std::span<const std::uint8_t> corpus, const ModelConfig& mcfg, const TrainConfig& tcfg,
                          std::size_t seq_len, double eval_fraction) {
  if (mcfg.vocab != 256) throw ConfigError("the character model works on bytes: vocab must be 256");
  if (seq_len == 0 || seq_len > mcfg.max_len) throw ConfigError("seq_len must be in [1, max_len]");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction must be in (0, 1)");
  const auto split = static_cast<std::size_t>(static_cast<double>(corpus.size()) * (1.0 - eval_fraction));
  const auto train_part = corpus.subspan(0, split);
  const auto eval_part = corpus.subspan(split);
  if (train_part.size() <= seq_len || eval_part.size() <= seq_len)
    throw ConfigError("corpus too small for seq_len " + std::to_string(seq_len));
  const std::vector<Batch> eval_set = lm_eval_batches(eval_part, tcfg.batch, seq_len, tcfg.eval_batches);
  Rng root(tcfg.seed);
  Rng data_rng = root.derive(2);

  return run_training(
      mcfg, tcfg, [&] { return lm_batch(train_part, data_rng, tcfg.batch, seq_len); },
      [&](const Model& m, TrainResult&, bool&) { return mean_loss(m, eval_set); });
}

AblationReport ablate_factorization(std::span<const std::uint8_t> corpus, const ModelConfig& base,
                                    const TrainConfig& tcfg, std::size_t seq_len, std::size_t factor_rank) {
  if (base.variant != Variant::Full && base.variant != Variant::Local)
    throw ConfigError("factorization ablation needs the full or local variant");
  if (factor_rank == 0) throw ConfigError("factor_rank must be positive");
  auto arm = [&](std::size_t rank, const char* name) {
    ModelConfig m = base;
    m.factor_rank = rank;
    TrainConfig t = tcfg;
    auto suffix = [&](const std::string& p, const char* ext) {
      if (p.empty()) return p;
      std::filesystem::path path(p);
      return (path.parent_path() / (path.stem().string() + "_" + name + ext)).string();
    };
    t.metrics_path = suffix(tcfg.metrics_path, tcfg.metrics_path.empty() ? "" : ".csv");
    t.checkpoint_dir = suffix(tcfg.checkpoint_dir, "");
    const TrainResult r = train_char_lm(corpus, m, t, seq_len);
    return AblationArm{name, m.bias_parameter_count(), r.train_loss.empty() ? 0.0 : r.train_loss.back(),
                       r.final_eval_loss, r.final_eval_bpc};
  };
  AblationReport rep;
  rep.dense = arm(0, "dense");
  rep.factorized = arm(factor_rank, "factorized");
  rep.param_ratio = static_cast<double>(rep.dense.bias_params) / static_cast<double>(rep.factorized.bias_params);
  return rep;
}

}  // namespace aft
