#pragma once

/// @file trainer.hpp
/// @brief Debiased batch sampling, AdamW, the warmup-cosine schedule and the
/// training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tiger/data.hpp"
#include "tiger/model.hpp"
#include "tiger/objectives.hpp"

namespace tiger {

struct BatchSpec {
  int batch_size = 64;
  int min_cells = 64;
  int max_per_cell = 16;
  int nside = 8;
  bool enforce_distinct_toy_tod = true;

  void validate() const;
};

/// Draws min(batch_size, |dataset|) distinct records. One record from each of
/// up to min_cells random occupied cells first, then round-robin over cells
/// with at most max_per_cell per cell; the cap is lifted only when every cell
/// is exhausted. Within a cell, records whose (month, hour) bin is already in
/// the batch for that cell are taken last. Timed records come first in the
/// returned batch. Throws ContractError on an empty dataset.
std::vector<const Record*> sample_batch(const Dataset& data, const BatchSpec& spec, std::mt19937_64& rng);

struct OptimizerState {
  ModelParams m;
  ModelParams v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-3;
  double eps = 1e-8;

  /// Zero moments shaped like `params`.
  static OptimizerState zeros_like(const ModelParams& params);
};

/// One decoupled-weight-decay Adam update. Throws NumericError naming the
/// tensor on a non-finite gradient and DimensionError on a shape mismatch.
void adamw_step(ModelParams& params, const ModelParams& grads, OptimizerState& state, double lr);

struct ScheduleConfig {
  double lr_max = 1e-4;
  double lr_min = 1e-7;
  int warmup_iters = 100;
  int total_iters = 10000;

  void validate() const;
};

/// Linear warmup lr_max * iter / warmup, then cosine decay to lr_min at total_iters.
double lr_at(int iter, const ScheduleConfig& s);

struct TrainerConfig {
  BatchSpec batch;
  ScheduleConfig schedule;
  LossWeights weights;
  std::uint64_t seed = 1;
  int checkpoint_every = 500;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);

/// Affinity tables for the two classification heads.
struct TargetTables {
  AffinityTable geo;
  AffinityTable time;

  static TargetTables build(const ModelConfig& cfg);
};

/// Forward + backward + AdamW on one batch. Returns the pre-step losses.
LossBreakdown train_step(ModelParams& params, OptimizerState& opt, std::span<const Record* const> batch,
                         const ModelConfig& cfg, const TargetTables& tables, const LossWeights& weights, double lr);

struct LossGradients {
  LossBreakdown loss;
  ModelParams grads;
};

/// Loss of a batch and its gradient with respect to every parameter.
LossGradients compute_gradients(const ModelParams& params, std::span<const Record* const> batch,
                                const ModelConfig& cfg, const TargetTables& tables, const LossWeights& weights);

/// Loss of a batch without updating anything.
LossBreakdown evaluate_loss(const ModelParams& params, std::span<const Record* const> batch, const ModelConfig& cfg,
                            const TargetTables& tables, const LossWeights& weights);

struct LogRow {
  int iter = 0;
  double lr = 0.0;
  LossBreakdown loss;

  friend bool operator==(const LogRow& a, const LogRow& b) {
    return a.iter == b.iter && a.lr == b.lr && a.loss.v_l == b.loss.v_l && a.loss.v_t == b.loss.v_t &&
           a.loss.v_lt == b.loss.v_lt && a.loss.l_vt == b.loss.l_vt && a.loss.t_vl == b.loss.t_vl &&
           a.loss.geo == b.loss.geo && a.loss.time == b.loss.time && a.loss.total == b.loss.total;
  }
};

std::string log_header();
std::string format_log_row(const LogRow& row);
std::vector<LogRow> read_log(const std::filesystem::path& path);

/// Exact resumable state: float64 weights, moments and step.
void save_training_state(const std::filesystem::path& path, const ModelParams& params, const OptimizerState& opt);
void load_training_state(const std::filesystem::path& path, const ModelConfig& cfg, ModelParams& params,
                         OptimizerState& opt);

struct TrainingResult {
  ModelParams params;
  OptimizerState optimizer;
  std::vector<LogRow> log;
};

struct RunOptions {
  /// Directory for loss_log.csv, checkpoints and training state. Empty = no files.
  std::filesystem::path out_dir;
  /// Training-state file to resume from.
  std::optional<std::filesystem::path> resume;
  /// Called after each checkpoint with (iter, params).
  std::function<void(int, const ModelParams&)> on_checkpoint;
  /// Called after every iteration.
  std::function<void(const LogRow&)> on_iter;
};

/// Trains from init_params(model_cfg, trainer_cfg.seed) or a resumed state up
/// to schedule.total_iters. The batch at iteration i depends only on
/// (seed, i), so a resumed run repeats an uninterrupted one exactly.
/// Writes model_<iter>.ckpt and state_<iter>.bin every checkpoint_every
/// iterations and model_final.ckpt at the end.
TrainingResult run_training(const Dataset& data, const ModelConfig& model_cfg, const TrainerConfig& trainer_cfg,
                            const RunOptions& options = {});

/// Sampler generator for iteration `iter`.
std::mt19937_64 iteration_rng(std::uint64_t seed, int iter);

}  // namespace tiger
