#include "blockprune/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "blockprune/checkpoint.hpp"
#include "blockprune/quantize.hpp"

namespace blockprune {

namespace fs = std::filesystem;
using nlohmann::json;

double time_inference_ms(const Model& model, const Tensor<std::int32_t>& ids, int warmup, int reps,
                         const MaskSet* masks) {
  for (int i = 0; i < warmup; ++i) (void)forward_logits(model, ids, masks);
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)forward_logits(model, ids, masks);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

json BenchResult::to_json() const {
  return json{{"method", method},
              {"lambda", lambda},
              {"block_size", block_size},
              {"seed", seed},
              {"density", density},
              {"linear_params", linear_params},
              {"head_compression", head_compression},
              {"accuracy", accuracy},
              {"dense_accuracy", dense_accuracy},
              {"median_ms", median_ms},
              {"dense_median_ms", dense_median_ms},
              {"speedup", speedup},
              {"checkpoint_dir", checkpoint_dir},
              {"error", error}};
}

BenchResult BenchResult::from_json(const json& j) {
  BenchResult r;
  r.method = j.value("method", "");
  r.lambda = j.value("lambda", 0.0);
  r.block_size = j.value("block_size", std::int64_t{0});
  r.seed = j.value("seed", std::uint64_t{0});
  r.density = j.value("density", 1.0);
  r.linear_params = j.value("linear_params", std::int64_t{0});
  r.head_compression = j.value("head_compression", 1.0);
  r.accuracy = j.value("accuracy", 0.0);
  r.dense_accuracy = j.value("dense_accuracy", 0.0);
  r.median_ms = j.value("median_ms", 0.0);
  r.dense_median_ms = j.value("dense_median_ms", 0.0);
  r.speedup = j.value("speedup", 1.0);
  r.checkpoint_dir = j.value("checkpoint_dir", "");
  r.error = j.value("error", "");
  return r;
}

void write_tradeoff_csv(const std::string& path, std::vector<BenchResult> rows) {
  std::sort(rows.begin(), rows.end(), [](const BenchResult& a, const BenchResult& b) { return a.density < b.density; });
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw RunError("cannot write " + path);
    out << "method,lambda,block_size,seed,density,linear_params,head_compression,accuracy,median_ms,"
           "dense_median_ms,speedup,error\n";
    for (const BenchResult& r : rows) {
      char buf[384];
      std::snprintf(buf, sizeof buf, "%s,%.8g,%lld,%llu,%.8g,%lld,%.8g,%.8g,%.8g,%.8g,%.8g,%s\n",
                    r.method.c_str(), r.lambda, static_cast<long long>(r.block_size),
                    static_cast<unsigned long long>(r.seed), r.density, static_cast<long long>(r.linear_params),
                    r.head_compression, r.accuracy, r.median_ms, r.dense_median_ms, r.speedup, r.error.c_str());
      out << buf;
    }
  }
  fs::rename(tmp, path);
}

void write_summary_json(const std::string& path, const std::vector<BenchResult>& rows) {
  json arr = json::array();
  for (const BenchResult& r : rows) arr.push_back(r.to_json());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw RunError("cannot write " + path);
    out << json{{"results", arr}}.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

namespace {

Tensor<std::int32_t> bench_batch_ids(const Dataset& data, std::int64_t batch) {
  const std::int64_t L = data.seq_len(), n = data.size();
  Tensor<std::int32_t> ids({batch, L});
  for (std::int64_t r = 0; r < batch; ++r)
    for (std::int64_t j = 0; j < L; ++j) ids[r * L + j] = data.ids[(r % n) * L + j];
  return ids;
}

}  // namespace

BenchResult run_pipeline_point(const RunConfig& cfg, const Dataset& train, const Dataset& dev,
                               const Model& dense, const Model* large_teacher, double lambda,
                               std::int64_t block_size, std::uint64_t seed, const std::string& point_dir) {
  BenchResult r;
  r.method = method_name(cfg.method);
  r.lambda = lambda;
  r.block_size = block_size;
  r.seed = seed;
  r.checkpoint_dir = point_dir;

  const Model* teacher = nullptr;
  if (cfg.method == Method::HybridFilledLT) {
    if (!large_teacher) throw ContractError("pipeline: large-teacher method without a large teacher");
    teacher = large_teacher;
  } else if (method_uses_teacher(cfg.method)) {
    teacher = &dense;
  }

  FinePruneRun run;
  run.schedule = cfg.schedule;
  run.schedule.lambda_end = lambda;
  run.opts = cfg.train;
  run.opts.seed = seed;

  PruneState prune = attach_method(dense, cfg.method, block_size, cfg.tied_heads);
  TrainResult tr = fine_prune(run, dense, std::move(prune), teacher, train, dev);

  MaskSet masks = tr.prune.masks(tr.model);
  const DensityReport dr = density_report(tr.model, &masks);
  r.density = dr.density;
  r.head_compression = dr.head_compression;

  CompactPlan plan = plan_compaction(tr.model, masks, &tr.prune);
  Model cmodel = compact(tr.model, masks, plan);
  Rng verify_rng(seed ^ 0x5eedbeefULL);
  (void)verify_equivalence(tr.model, masks, cmodel, 4, 16, std::min<std::int64_t>(dev.seq_len(), 32), verify_rng);

  if (method_uses_fill(cfg.method)) {
    Rng fill_rng(seed ^ 0xf111ULL);
    cmodel = compact_filled(tr.model, masks, plan, fill_rng);
    TrainOptions ft = cfg.train;
    ft.seed = seed ^ 0xf177ULL;
    finetune_compact(cmodel, teacher, train, ft, cfg.fill_steps);
  }

  const EvalResult dense_eval = evaluate(dense, dev);
  const EvalResult ev = evaluate(cmodel, dev);
  r.dense_accuracy = dense_eval.accuracy;
  r.accuracy = ev.accuracy;
  r.linear_params = linear_param_census(cmodel).total;

  Tensor<std::int32_t> bench_ids = bench_batch_ids(dev, cfg.bench_batch);
  r.dense_median_ms =
      time_inference_ms(dense, bench_ids, static_cast<int>(cfg.bench_warmup), static_cast<int>(cfg.bench_reps));
  r.median_ms =
      time_inference_ms(cmodel, bench_ids, static_cast<int>(cfg.bench_warmup), static_cast<int>(cfg.bench_reps));
  r.speedup = r.dense_median_ms / r.median_ms;

  if (!point_dir.empty()) {
    fs::create_directories(point_dir);
    json metrics = {{"accuracy", tr.final_eval.accuracy},
                    {"loss", tr.final_eval.loss},
                    {"density", r.density},
                    {"lambda", lambda}};
    save_checkpoint(point_dir + "/pruned", tr.model, &tr.prune, nullptr, json{{"metrics", metrics}});
    json cmetrics = {{"accuracy", ev.accuracy}, {"loss", ev.loss}};
    save_checkpoint(point_dir + "/compact", cmodel, nullptr, nullptr, json{{"metrics", cmetrics}});
    write_history_csv(point_dir + "/history.csv", tr.history);
    std::ofstream out(point_dir + "/result.json");
    out << r.to_json().dump(2) << "\n";
  }
  return r;
}

double calibrate_lambda_center(const RunConfig& cfg, const Dataset& train, const Dataset& dev,
                               const Model& dense, bool verbose) {
  // short probe runs; bisect on final density around 50%
  RunConfig probe = cfg;
  probe.train.epochs = std::max<std::int64_t>(2, cfg.train.epochs / 3);
  double lambda = 0.02;
  double lo = 0.0, hi = 0.0;
  for (int iter = 0; iter < 5; ++iter) {
    FinePruneRun run;
    run.schedule = probe.schedule;
    run.schedule.lambda_end = lambda;
    run.opts = probe.train;
    run.opts.seed = cfg.seeds.front();
    PruneState prune = attach_method(dense, probe.method, probe.block_size, probe.tied_heads);
    const Model* teacher = method_uses_teacher(probe.method) ? &dense : nullptr;
    TrainResult tr = fine_prune(run, dense, std::move(prune), teacher, train, dev);
    MaskSet masks = tr.prune.masks(tr.model);
    const double density = density_report(tr.model, &masks).density;
    if (verbose) std::printf("calibrate: lambda %.5f -> density %.3f\n", lambda, density);
    if (density > 0.6) {
      lo = lambda;
      lambda = hi > 0 ? 0.5 * (lambda + hi) : lambda * 4;
    } else if (density < 0.4) {
      hi = lambda;
      lambda = lo > 0 ? 0.5 * (lambda + lo) : lambda / 4;
    } else {
      return lambda;
    }
  }
  return lambda;
}

std::vector<BenchResult> run_sweep(const RunConfig& cfg, bool verbose) {
  auto [train, dev] = make_task(cfg.task);
  fs::create_directories(cfg.out_dir);

  std::vector<double> lambdas = cfg.lambda_list;
  std::vector<std::int64_t> blocks = cfg.block_sizes;
  const bool block_sweep = !blocks.empty();
  if (block_sweep && lambdas.empty()) lambdas = {cfg.lambda_center};
  if (!block_sweep) blocks = {cfg.block_size};

  std::vector<BenchResult> rows;
  int point_id = 0;
  std::map<std::uint64_t, Model> dense_cache;
  std::map<std::uint64_t, Model> large_cache;

  for (const std::uint64_t seed : cfg.seeds) {
    TrainOptions topts = cfg.train;
    topts.epochs = cfg.teacher_epochs;
    topts.seed = seed;
    if (!dense_cache.count(seed)) {
      if (verbose) std::printf("seed %llu: training dense baseline\n", static_cast<unsigned long long>(seed));
      dense_cache.emplace(seed, train_dense(cfg.model, train, dev, topts));
    }
    if (cfg.method == Method::HybridFilledLT && !large_cache.count(seed)) {
      if (verbose) std::printf("seed %llu: training large teacher\n", static_cast<unsigned long long>(seed));
      large_cache.emplace(seed, train_dense(cfg.model.large(), train, dev, topts));
    }
  }

  if (lambdas.empty()) {
    double center = cfg.lambda_center;
    if (center <= 0.0) {
      if (verbose) std::printf("calibrating lambda center\n");
      center = calibrate_lambda_center(cfg, train, dev, dense_cache.at(cfg.seeds.front()), verbose);
    }
    for (const double m : cfg.lambda_multipliers) lambdas.push_back(center * m);
  }
  if (lambdas.size() * blocks.size() < 2 && cfg.lambda_list.size() != 1)
    ;  // single-point sweeps are allowed when requested explicitly

  for (const std::uint64_t seed : cfg.seeds) {
    const Model& dense = dense_cache.at(seed);
    const Model* large = large_cache.count(seed) ? &large_cache.at(seed) : nullptr;
    for (const std::int64_t bs : blocks) {
      for (const double lambda : lambdas) {
        const std::string point_dir = cfg.out_dir + "/point" + std::to_string(point_id++);
        if (verbose)
          std::printf("sweep point: seed %llu lambda %.5f block %lld\n", static_cast<unsigned long long>(seed),
                      lambda, static_cast<long long>(bs));
        try {
          rows.push_back(run_pipeline_point(cfg, train, dev, dense, large, lambda, bs, seed, point_dir));
        } catch (const std::exception& e) {
          BenchResult failed;
          failed.method = method_name(cfg.method);
          failed.lambda = lambda;
          failed.block_size = bs;
          failed.seed = seed;
          failed.checkpoint_dir = point_dir;
          failed.error = e.what();
          rows.push_back(failed);
        }
      }
    }
  }

  write_tradeoff_csv(cfg.out_dir + "/tradeoff.csv", rows);
  write_summary_json(cfg.out_dir + "/summary.json", rows);
  return rows;
}

void write_report(const std::string& results_dir, const std::string& out_dir) {
  std::vector<BenchResult> rows;
  if (!fs::exists(results_dir)) throw RunError("results directory does not exist: " + results_dir);
  for (const auto& entry : fs::recursive_directory_iterator(results_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "result.json") {
      std::ifstream in(entry.path());
      rows.push_back(BenchResult::from_json(json::parse(in)));
    }
  }
  if (rows.empty()) throw RunError("no results found under " + results_dir);
  fs::create_directories(out_dir);

  auto write_series = [&](const std::string& path, auto x_of, const char* x_name) {
    std::map<std::string, std::vector<const BenchResult*>> by_method;
    for (const BenchResult& r : rows)
      if (r.error.empty()) by_method[r.method].push_back(&r);
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw RunError("cannot write " + path);
      out << "method," << x_name << ",accuracy\n";
      for (auto& [method, series] : by_method) {
        std::sort(series.begin(), series.end(),
                  [&](const BenchResult* a, const BenchResult* b) { return x_of(*a) < x_of(*b); });
        for (const BenchResult* r : series) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "%s,%.8g,%.8g\n", method.c_str(), x_of(*r), r->accuracy);
          out << buf;
        }
      }
    }
    fs::rename(tmp, path);
  };
  write_series(out_dir + "/accuracy_vs_speedup.csv", [](const BenchResult& r) { return r.speedup; }, "speedup");
  write_series(out_dir + "/accuracy_vs_density.csv", [](const BenchResult& r) { return r.density; }, "density");

  const std::string tmp = out_dir + "/summary.txt.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw RunError("cannot write summary");
    out << "method            lambda    block  seed  density  params    headcmp  accuracy  speedup\n";
    for (const BenchResult& r : rows) {
      std::int64_t params = r.linear_params;
      const std::string compact_dir = r.checkpoint_dir + "/compact";
      if (!r.checkpoint_dir.empty() && fs::exists(compact_dir)) {
        // the census is recomputed from the stored checkpoint
        Checkpoint ck = load_checkpoint(compact_dir);
        params = linear_param_census(ck.model).total;
      }
      char buf[256];
      if (r.error.empty())
        std::snprintf(buf, sizeof buf, "%-16s %9.5f %6lld %5llu %8.4f %-9lld %7.2f %9.4f %8.2f\n",
                      r.method.c_str(), r.lambda, static_cast<long long>(r.block_size),
                      static_cast<unsigned long long>(r.seed), r.density, static_cast<long long>(params),
                      r.head_compression, r.accuracy, r.speedup);
      else
        std::snprintf(buf, sizeof buf, "%-16s %9.5f %6lld %5llu  FAILED: %s\n", r.method.c_str(), r.lambda,
                      static_cast<long long>(r.block_size), static_cast<unsigned long long>(r.seed),
                      r.error.c_str());
      out << buf;
    }
  }
  fs::rename(tmp, out_dir + "/summary.txt");
}

}  // namespace blockprune
