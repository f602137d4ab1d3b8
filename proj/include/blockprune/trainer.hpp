#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blockprune/data.hpp"
#include "blockprune/model.hpp"

namespace blockprune {

struct PruneSchedule {
  double warmup_frac = 0.1;
  double ramp_frac = 0.5;
  double cooldown_frac = 0.2;
  double lambda_end = 0.0;

  void validate() const;
};

// lambda_base at a given step: zero through warmup, linear ramp to
// lambda_end, constant afterwards. Masks freeze separately over the cooldown
// tail: scores stop receiving gradients while weights keep training.
double schedule_lambda(std::int64_t step, std::int64_t total_steps, const PruneSchedule& sched);
bool schedule_in_cooldown(std::int64_t step, std::int64_t total_steps, const PruneSchedule& sched);

struct TrainOptions {
  std::int64_t epochs = 10;
  std::int64_t batch_size = 32;
  double lr = 5e-4;
  double score_lr = 1e-2;  // movement scores learn faster than weights
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double alpha = 0.5;        // task-loss share when distilling
  double temperature = 2.0;
  std::uint64_t seed = 1;
  std::int64_t history_every = 0;  // extra history rows every N steps (0 = epoch ends only)
  bool verbose = false;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

// Deterministic metrics; dropout off. With threads > 1 the batch splits
// across workers and per-example results combine in index order.
EvalResult evaluate(const Model& model, const Dataset& data, const MaskSet* masks = nullptr, int threads = 1);

struct HistoryRow {
  std::int64_t step = 0;
  double lambda = 0.0;
  double density = 1.0;
  double head_compression = 1.0;
  double accuracy = 0.0;
  double loss = 0.0;
};

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows);

struct TrainResult {
  Model model;
  PruneState prune;
  std::vector<HistoryRow> history;
  Model best_model;
  double best_accuracy = 0.0;
  EvalResult final_eval;
};

// Plain fine-tuning from a fresh initialization; the dense teacher and the
// pruning starting point.
Model train_dense(const ModelConfig& cfg, const Dataset& train, const Dataset& dev, const TrainOptions& opts);

struct FinePruneRun {
  PruneSchedule schedule;
  TrainOptions opts;
};

// Joint weight + score training with the split regularizer under the
// schedule. `prune` must already be attached; `teacher` may be null.
TrainResult fine_prune(const FinePruneRun& run, const Model& start, PruneState prune, const Model* teacher,
                       const Dataset& train, const Dataset& dev);

// Post-compaction fine-tuning (no scores, no masks), optionally distilled.
void finetune_compact(Model& model, const Model* teacher, const Dataset& train, const TrainOptions& opts,
                      std::int64_t steps);

}  // namespace blockprune
