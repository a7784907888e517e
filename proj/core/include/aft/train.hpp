#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "aft/model.hpp"
#include "aft/tasks.hpp"

namespace aft {

enum class Schedule { Cosine, InverseSqrt };

struct TrainConfig {
  double peak_lr = 3e-3;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::Cosine;
  double grad_clip = 0.0;  // global norm; 0 disables
  std::size_t eval_every = 100;
  std::size_t eval_batches = 4;
  /// Copy task: stop once held-out sequence exact-match exceeds this (0 never stops early).
  double target_accuracy = 0.0;
  std::string metrics_path;   // CSV, empty for none
  std::string checkpoint_dir; // written at the end, empty for none

  void validate() const;
};

std::string to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(std::string_view text, const TrainConfig& base = {});

/// Linear warmup 0 -> peak over warmup_steps, then cosine decay to 0 at
/// total_steps (or peak * sqrt(warmup / step) for InverseSqrt). step >= 1.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct AdamWState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

AdamWState adamw_init(const std::vector<ParamRef>& params);

/// One decoupled-decay Adam step; decay only touches params flagged `decay`.
void adamw_step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads, AdamWState& state, double lr,
                const TrainConfig& cfg);

/// Scales grads so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(const std::vector<ParamRef>& grads, double max_norm);

struct MetricRow {
  std::size_t step = 0;
  std::string split;  // "train" or "eval"
  double loss = 0.0;
  double bpc = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "step,split,loss,bpc,lr,wall_ms";
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

struct TrainResult {
  Model model;
  std::vector<double> train_loss;  // one per step
  std::vector<MetricRow> log;
  std::size_t steps_run = 0;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  double final_eval_bpc = 0.0;
  CopyAccuracy accuracy{};  // copy task only
};

TrainResult train_copy_task(const ModelConfig& mcfg, const TrainConfig& tcfg, const CopyTask& task = {});

/// The last `eval_fraction` of the corpus is held out for evaluation.
TrainResult train_char_lm(std::span<const std::uint8_t> corpus, const ModelConfig& mcfg, const TrainConfig& tcfg,
                          std::size_t seq_len, double eval_fraction = 0.1);

/// Mean eval loss of a model on held-out windows.
double eval_lm_loss(const Model& m, const std::vector<Batch>& batches);

struct AblationArm {
  std::string name;
  std::size_t bias_params = 0;  // per layer
  double final_train_loss = 0.0;
  double final_eval_loss = 0.0;
  double final_eval_bpc = 0.0;
};

struct AblationReport {
  AblationArm dense, factorized;
  double param_ratio = 0.0;  // dense / factorized bias parameters
};

/// Same corpus, seed and schedule; only the bias parameterization differs.
AblationReport ablate_factorization(std::span<const std::uint8_t> corpus, const ModelConfig& base,
                                    const TrainConfig& tcfg, std::size_t seq_len, std::size_t factor_rank);

}  // namespace aft
