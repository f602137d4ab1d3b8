#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "blockprune/compact.hpp"
#include "blockprune/runconfig.hpp"

namespace blockprune {

// Median wall time of repeated forward passes over one fixed batch,
// single-threaded. Candidates under comparison must be timed in the same
// process with the same data.
double time_inference_ms(const Model& model, const Tensor<std::int32_t>& ids, int warmup = 5, int reps = 31,
                         const MaskSet* masks = nullptr);

struct BenchResult {
  std::string method;
  double lambda = 0.0;
  std::int64_t block_size = 0;
  std::uint64_t seed = 0;
  double density = 1.0;              // masked density before compaction
  std::int64_t linear_params = 0;    // compacted linear weight count
  double head_compression = 1.0;
  double accuracy = 0.0;
  double dense_accuracy = 0.0;
  double median_ms = 0.0;
  double dense_median_ms = 0.0;
  double speedup = 1.0;
  std::string checkpoint_dir;
  std::string error;  // non-empty for failed sweep points

  nlohmann::json to_json() const;
  static BenchResult from_json(const nlohmann::json& j);
};

void write_tradeoff_csv(const std::string& path, std::vector<BenchResult> rows);  // sorted by density
void write_summary_json(const std::string& path, const std::vector<BenchResult>& rows);

// prune -> compact -> [fill] -> eval -> time for one sweep point. `dense` is
// both the starting weights and (method permitting) the teacher.
BenchResult run_pipeline_point(const RunConfig& cfg, const Dataset& train, const Dataset& dev,
                               const Model& dense, const Model* large_teacher, double lambda,
                               std::int64_t block_size, std::uint64_t seed, const std::string& point_dir);

// Short probe runs homing in on a lambda_base that lands near 50% density.
double calibrate_lambda_center(const RunConfig& cfg, const Dataset& train, const Dataset& dev,
                               const Model& dense, bool verbose = false);

std::vector<BenchResult> run_sweep(const RunConfig& cfg, bool verbose = false);

// Plot-ready series (accuracy vs speedup / density, one series per method)
// plus a human-readable summary whose census column is recomputed from the
// stored checkpoints.
void write_report(const std::string& results_dir, const std::string& out_dir);

}  // namespace blockprune
