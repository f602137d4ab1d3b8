#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "blockprune/data.hpp"
#include "blockprune/model.hpp"
#include "blockprune/trainer.hpp"

namespace blockprune {

// The structured run configuration file (JSON). Validated up front; any
// unknown top-level key is rejected.
struct RunConfig {
  ModelConfig model;
  TaskSpec task;

  Method method = Method::Hybrid;
  std::int64_t block_size = 32;
  bool tied_heads = true;

  TrainOptions train;               // fine-pruning epochs live here
  std::int64_t teacher_epochs = 3;  // dense runs are short; pruning runs long
  PruneSchedule schedule;

  std::vector<double> lambda_list;  // explicit sweep; empty -> multipliers x center
  std::vector<double> lambda_multipliers = {0.25, 0.5, 1.0, 2.0, 4.0};
  double lambda_center = 0.0;  // 0 -> calibrate with a short probe run
  std::vector<std::int64_t> block_sizes;  // non-empty -> block-size sweep
  std::vector<std::uint64_t> seeds = {1};

  std::int64_t fill_steps = 100;
  std::string out_dir = "runs/out";
  std::string teacher_dir;

  std::int64_t bench_batch = 128;
  std::int64_t bench_warmup = 5;
  std::int64_t bench_reps = 31;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

}  // namespace blockprune
