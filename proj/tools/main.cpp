#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "blockprune/bench.hpp"
#include "blockprune/checkpoint.hpp"
#include "blockprune/compact.hpp"
#include "blockprune/quantize.hpp"

using namespace blockprune;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool checked = false;
  bool verbose = false;
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = RunConfig::from_file(args.config_path);
  if (args.seed_set) cfg.seeds = {args.seed};
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

MaskSet checkpoint_masks(const Checkpoint& ck) {
  return ck.prune ? ck.prune->masks(ck.model) : MaskSet{};
}

Model materialized(const Checkpoint& ck) {
  return ck.quant ? ck.quant->materialize() : ck.model;
}

void print_eval(const char* tag, const EvalResult& ev, const DensityReport& dr) {
  json j = {{"what", tag},
            {"accuracy", ev.accuracy},
            {"loss", ev.loss},
            {"density", dr.density},
            {"head_compression", dr.head_compression},
            {"nonempty_heads", dr.nonempty_heads},
            {"total_heads", dr.total_heads}};
  std::printf("%s\n", j.dump(2).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blockprune: score-driven block pruning, compaction and benchmarking for mini transformer encoders"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string in_dir, teacher_dir, start_dir, baseline_dir, results_dir;
  double lambda_override = -1.0;
  std::int64_t fill_steps_override = -1;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* copt = sub->add_option("--config", args.config_path, "run configuration file (JSON)");
    if (needs_config) copt->required();
    sub->add_option("--out", args.out_dir, "output directory");
    sub->add_option("--seed", args.seed, "seed override")->each([&](const std::string&) { args.seed_set = true; });
    sub->add_option("--threads", args.threads, "evaluation worker threads");
    sub->add_flag("--checked", args.checked, "verify every float result is finite");
    sub->add_flag("--verbose", args.verbose, "progress output");
  };

  CLI::App* teacher_train = app.add_subcommand("teacher-train", "train a dense model (teacher / pruning start)");
  add_common(teacher_train, true);
  bool large = false;
  teacher_train->add_flag("--large", large, "train the doubled-width large-teacher variant");

  CLI::App* prune_cmd = app.add_subcommand("prune", "fine-prune a dense model with the configured method");
  add_common(prune_cmd, true);
  prune_cmd->add_option("--start", start_dir, "dense starting checkpoint (defaults to --teacher)");
  prune_cmd->add_option("--teacher", teacher_dir, "teacher checkpoint");
  prune_cmd->add_option("--lambda", lambda_override, "override schedule lambda_end");

  CLI::App* compact_cmd = app.add_subcommand("compact", "crop empty FFN dims and heads from a pruned checkpoint");
  add_common(compact_cmd, false);
  compact_cmd->add_option("--in", in_dir, "pruned checkpoint")->required();

  CLI::App* fill_cmd = app.add_subcommand("fill", "reinitialize reclaimed weights and fine-tune the compact model");
  add_common(fill_cmd, true);
  fill_cmd->add_option("--in", in_dir, "pruned checkpoint")->required();
  fill_cmd->add_option("--teacher", teacher_dir, "teacher checkpoint");
  fill_cmd->add_option("--steps", fill_steps_override, "fine-tuning steps");

  CLI::App* rewind_cmd = app.add_subcommand("rewind", "re-run pruning with surviving heads protected");
  add_common(rewind_cmd, true);
  rewind_cmd->add_option("--in", in_dir, "first-run pruned checkpoint")->required();
  rewind_cmd->add_option("--start", start_dir, "dense starting checkpoint");
  rewind_cmd->add_option("--teacher", teacher_dir, "teacher checkpoint");

  CLI::App* quant_cmd = app.add_subcommand("quantize", "8-bit weight quantization of a compacted checkpoint");
  add_common(quant_cmd, false);
  quant_cmd->add_option("--in", in_dir, "compacted checkpoint")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the configured task");
  add_common(eval_cmd, true);
  eval_cmd->add_option("--in", in_dir, "checkpoint")->required();

  CLI::App* bench_cmd = app.add_subcommand("bench", "time a checkpoint against a dense baseline");
  add_common(bench_cmd, true);
  bench_cmd->add_option("--in", in_dir, "candidate checkpoint")->required();
  bench_cmd->add_option("--baseline", baseline_dir, "dense baseline checkpoint")->required();

  CLI::App* sweep_cmd = app.add_subcommand("sweep", "lambda / block-size sweep over the full pipeline");
  add_common(sweep_cmd, true);

  CLI::App* report_cmd = app.add_subcommand("report", "plot-ready CSVs and a summary table from sweep results");
  add_common(report_cmd, false);
  report_cmd->add_option("--in", results_dir, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (args.checked) checked_mode().store(true);

  try {
    if (teacher_train->parsed()) {
      RunConfig cfg = load_config(args);
      auto [train, dev] = make_task(cfg.task);
      TrainOptions opts = cfg.train;
      opts.epochs = cfg.teacher_epochs;
      opts.seed = args.seed_set ? args.seed : cfg.seeds.front();
      opts.verbose = args.verbose;
      Model model = train_dense(large ? cfg.model.large() : cfg.model, train, dev, opts);
      const EvalResult ev = evaluate(model, dev, nullptr, args.threads);
      const DensityReport dr = density_report(model);
      if (cfg.out_dir.empty()) throw ContractError("teacher-train: --out (or config out) required");
      save_checkpoint(cfg.out_dir, model, nullptr, nullptr,
                      json{{"metrics", {{"accuracy", ev.accuracy}, {"loss", ev.loss}}}});
      print_eval("dense", ev, dr);
    } else if (prune_cmd->parsed()) {
      RunConfig cfg = load_config(args);
      auto [train, dev] = make_task(cfg.task);
      if (start_dir.empty()) start_dir = teacher_dir;
      if (start_dir.empty() && !cfg.teacher_dir.empty()) start_dir = teacher_dir = cfg.teacher_dir;
      if (start_dir.empty()) throw RunError("prune: provide --start or --teacher (or teacher_dir in config)");
      Checkpoint start_ck = load_checkpoint(start_dir);
      Model start = materialized(start_ck);

      const Model* teacher = nullptr;
      Model teacher_model;
      if (method_uses_teacher(cfg.method)) {
        if (teacher_dir.empty()) throw RunError("prune: method requires a teacher checkpoint");
        Checkpoint tck = load_checkpoint(teacher_dir);
        teacher_model = materialized(tck);
        teacher = &teacher_model;
      }

      FinePruneRun run;
      run.schedule = cfg.schedule;
      if (lambda_override >= 0) run.schedule.lambda_end = lambda_override;
      run.opts = cfg.train;
      run.opts.seed = args.seed_set ? args.seed : cfg.seeds.front();
      run.opts.verbose = args.verbose;

      PruneState prune = attach_method(start, cfg.method, cfg.block_size, cfg.tied_heads);
      TrainResult tr = fine_prune(run, start, std::move(prune), teacher, train, dev);

      MaskSet masks = tr.prune.masks(tr.model);
      const DensityReport dr = density_report(tr.model, &masks);
      if (cfg.out_dir.empty()) throw ContractError("prune: --out (or config out) required");
      fs::create_directories(cfg.out_dir);
      json metrics = {{"accuracy", tr.final_eval.accuracy},
                      {"loss", tr.final_eval.loss},
                      {"density", dr.density},
                      {"lambda", run.schedule.lambda_end}};
      save_checkpoint(cfg.out_dir + "/final", tr.model, &tr.prune, nullptr, json{{"metrics", metrics}});
      save_checkpoint(cfg.out_dir + "/best", tr.best_model, &tr.prune, nullptr,
                      json{{"metrics", {{"accuracy", tr.best_accuracy}}}});
      write_history_csv(cfg.out_dir + "/history.csv", tr.history);
      print_eval("pruned", tr.final_eval, dr);
    } else if (compact_cmd->parsed()) {
      Checkpoint ck = load_checkpoint(in_dir);
      if (!ck.prune) throw RunError("compact: checkpoint has no pruning state");
      MaskSet masks = checkpoint_masks(ck);
      CompactPlan plan = plan_compaction(ck.model, masks, &*ck.prune);
      Model cmodel = compact(ck.model, masks, plan);
      Rng rng(7);
      const double diff = verify_equivalence(ck.model, masks, cmodel, 4, 16,
                                             std::min<std::int64_t>(ck.model.cfg.max_len, 32), rng);
      if (args.out_dir.empty()) throw ContractError("compact: --out required");
      const Census census = linear_param_census(cmodel);
      save_checkpoint(args.out_dir, cmodel, nullptr, nullptr,
                      json{{"metrics", {{"verify_max_diff", diff}, {"linear_params", census.total}}}});
      std::printf("%s\n", json{{"what", "compact"},
                               {"verify_max_diff", diff},
                               {"linear_params", census.total}}
                              .dump(2)
                              .c_str());
    } else if (fill_cmd->parsed()) {
      RunConfig cfg = load_config(args);
      auto [train, dev] = make_task(cfg.task);
      Checkpoint ck = load_checkpoint(in_dir);
      if (!ck.prune) throw RunError("fill: checkpoint has no pruning state");
      MaskSet masks = checkpoint_masks(ck);
      CompactPlan plan = plan_compaction(ck.model, masks, &*ck.prune);
      Rng rng((args.seed_set ? args.seed : cfg.seeds.front()) ^ 0xf111ULL);
      Model filled = compact_filled(ck.model, masks, plan, rng);
      const Model* teacher = nullptr;
      Model teacher_model;
      if (!teacher_dir.empty()) {
        Checkpoint tck = load_checkpoint(teacher_dir);
        teacher_model = materialized(tck);
        teacher = &teacher_model;
      }
      TrainOptions ft = cfg.train;
      ft.seed = (args.seed_set ? args.seed : cfg.seeds.front()) ^ 0xf177ULL;
      finetune_compact(filled, teacher, train, ft, fill_steps_override >= 0 ? fill_steps_override : cfg.fill_steps);
      const EvalResult ev = evaluate(filled, dev, nullptr, args.threads);
      if (cfg.out_dir.empty()) throw ContractError("fill: --out (or config out) required");
      save_checkpoint(cfg.out_dir, filled, nullptr, nullptr,
                      json{{"metrics", {{"accuracy", ev.accuracy}, {"loss", ev.loss}}}});
      print_eval("filled", ev, density_report(filled));
    } else if (rewind_cmd->parsed()) {
      RunConfig cfg = load_config(args);
      auto [train, dev] = make_task(cfg.task);
      Checkpoint first = load_checkpoint(in_dir);
      if (!first.prune) throw RunError("rewind: checkpoint has no pruning state");
      MaskSet masks = checkpoint_masks(first);
      CompactPlan plan = plan_compaction(first.model, masks, &*first.prune);
      ProtectionMask protection = rewind_protection(plan, first.model);

      if (start_dir.empty()) start_dir = teacher_dir;
      if (start_dir.empty()) throw RunError("rewind: provide --start or --teacher");
      Checkpoint start_ck = load_checkpoint(start_dir);
      Model start = materialized(start_ck);
      const Model* teacher = nullptr;
      Model teacher_model;
      if (method_uses_teacher(cfg.method)) {
        if (teacher_dir.empty()) throw RunError("rewind: method requires a teacher checkpoint");
        Checkpoint tck = load_checkpoint(teacher_dir);
        teacher_model = materialized(tck);
        teacher = &teacher_model;
      }
      PruneState prune = attach_method(start, cfg.method, cfg.block_size, cfg.tied_heads);
      apply_protection(prune, protection, start);
      FinePruneRun run;
      run.schedule = cfg.schedule;
      run.opts = cfg.train;
      run.opts.seed = args.seed_set ? args.seed : cfg.seeds.front();
      run.opts.verbose = args.verbose;
      TrainResult tr = fine_prune(run, start, std::move(prune), teacher, train, dev);
      MaskSet masks2 = tr.prune.masks(tr.model);
      const DensityReport dr = density_report(tr.model, &masks2);
      if (cfg.out_dir.empty()) throw ContractError("rewind: --out (or config out) required");
      save_checkpoint(cfg.out_dir + "/final", tr.model, &tr.prune, nullptr,
                      json{{"metrics", {{"accuracy", tr.final_eval.accuracy}, {"density", dr.density}}}});
      write_history_csv(cfg.out_dir + "/history.csv", tr.history);
      print_eval("rewound", tr.final_eval, dr);
    } else if (quant_cmd->parsed()) {
      Checkpoint ck = load_checkpoint(in_dir);
      if (ck.prune) throw RunError("quantize: expected a compacted (dense) checkpoint");
      QuantModel qm = quantize_model(ck.model);
      const SizeReport sr = quant_size_report(ck.model);
      if (args.out_dir.empty()) throw ContractError("quantize: --out required");
      json report = {{"linear_params", sr.linear_params},
                     {"dense_baseline_params", sr.dense_baseline_params},
                     {"float_bytes", sr.float_bytes},
                     {"quant_bytes", sr.quant_bytes},
                     {"byte_ratio", sr.byte_ratio},
                     {"structural_compression", sr.structural_compression},
                     {"combined_compression", sr.combined_compression}};
      save_checkpoint(args.out_dir, ck.model, nullptr, &qm, json{{"size_report", report}});
      std::printf("%s\n", report.dump(2).c_str());
    } else if (eval_cmd->parsed()) {
      RunConfig cfg = load_config(args);
      auto [train, dev] = make_task(cfg.task);
      (void)train;
      Checkpoint ck = load_checkpoint(in_dir);
      Model model = materialized(ck);
      MaskSet masks = checkpoint_masks(ck);
      const EvalResult ev = evaluate(model, dev, masks.empty() ? nullptr : &masks, args.threads);
      print_eval("eval", ev, density_report(model, masks.empty() ? nullptr : &masks));
    } else if (bench_cmd->parsed()) {
      RunConfig cfg = load_config(args);
      auto [train, dev] = make_task(cfg.task);
      (void)train;
      Checkpoint cand_ck = load_checkpoint(in_dir);
      Checkpoint base_ck = load_checkpoint(baseline_dir);
      Model cand = materialized(cand_ck);
      Model base = materialized(base_ck);
      MaskSet cand_masks = checkpoint_masks(cand_ck);
      Tensor<std::int32_t> ids({cfg.bench_batch, dev.seq_len()});
      for (std::int64_t r = 0; r < cfg.bench_batch; ++r)
        for (std::int64_t j = 0; j < dev.seq_len(); ++j)
          ids[r * dev.seq_len() + j] = dev.ids[(r % dev.size()) * dev.seq_len() + j];
      const double base_ms = time_inference_ms(base, ids, static_cast<int>(cfg.bench_warmup),
                                               static_cast<int>(cfg.bench_reps));
      const double cand_ms = time_inference_ms(cand, ids, static_cast<int>(cfg.bench_warmup),
                                               static_cast<int>(cfg.bench_reps), cand_masks.empty() ? nullptr : &cand_masks);
      json out = {{"dense_median_ms", base_ms},
                  {"median_ms", cand_ms},
                  {"speedup", base_ms / cand_ms},
                  {"batch", cfg.bench_batch}};
      std::printf("%s\n", out.dump(2).c_str());
      if (!args.out_dir.empty()) {
        fs::create_directories(args.out_dir);
        std::ofstream f(args.out_dir + "/bench.json");
        f << out.dump(2) << "\n";
      }
    } else if (sweep_cmd->parsed()) {
      RunConfig cfg = load_config(args);
      std::vector<BenchResult> rows = run_sweep(cfg, args.verbose);
      std::printf("sweep complete: %zu points -> %s\n", rows.size(), cfg.out_dir.c_str());
    } else if (report_cmd->parsed()) {
      write_report(results_dir, args.out_dir.empty() ? results_dir : args.out_dir);
      std::printf("report written\n");
    }
  } catch (const EquivalenceError& e) {
    std::fprintf(stderr, "equivalence verification failed: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
