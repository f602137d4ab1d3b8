#include "blockprune/runconfig.hpp"

#include <fstream>
#include <set>

namespace blockprune {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ContractError("config: unknown key '" + it.key() + "' in " + where);
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RunError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw RunError("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown_keys(j, {"schema_version", "model", "task", "method", "train", "schedule", "sweep",
                          "fill_steps", "out", "teacher_dir", "bench"},
                      "top level");
  if (j.value("schema_version", 0) != 1) throw ContractError("config: schema_version must be 1");

  RunConfig c;
  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown_keys(m, {"d_model", "n_heads", "d_ff", "n_layers", "vocab_size", "max_len", "n_classes",
                            "activation", "dropout"},
                        "model");
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.n_heads = m.value("n_heads", c.model.n_heads);
    c.model.d_ff = m.value("d_ff", c.model.d_ff);
    c.model.n_layers = m.value("n_layers", c.model.n_layers);
    c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
    c.model.max_len = m.value("max_len", c.model.max_len);
    c.model.n_classes = m.value("n_classes", c.model.n_classes);
    const std::string act = m.value("activation", "gelu");
    if (act != "gelu" && act != "relu") throw ContractError("config: activation must be gelu or relu");
    c.model.activation = act == "relu" ? Activation::Relu : Activation::Gelu;
    c.model.dropout = m.value("dropout", c.model.dropout);
  }
  if (j.contains("task")) {
    const json& t = j.at("task");
    reject_unknown_keys(t, {"kind", "train_size", "dev_size", "seed", "seq_len", "path"}, "task");
    c.task.kind = t.value("kind", c.task.kind);
    c.task.train_size = t.value("train_size", c.task.train_size);
    c.task.dev_size = t.value("dev_size", c.task.dev_size);
    c.task.seed = t.value("seed", c.task.seed);
    c.task.seq_len = t.value("seq_len", c.task.seq_len);
    c.task.path = t.value("path", c.task.path);
  }
  if (j.contains("method")) {
    const json& m = j.at("method");
    reject_unknown_keys(m, {"name", "block_size", "tied_heads"}, "method");
    c.method = parse_method(m.value("name", "hybrid"));
    c.block_size = m.value("block_size", c.block_size);
    c.tied_heads = m.value("tied_heads", c.tied_heads);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown_keys(t,
                        {"epochs", "teacher_epochs", "batch_size", "lr", "score_lr", "beta1", "beta2", "eps",
                         "weight_decay", "alpha", "temperature", "history_every"},
                        "train");
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.teacher_epochs = t.value("teacher_epochs", c.teacher_epochs);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.score_lr = t.value("score_lr", c.train.score_lr);
    c.train.beta1 = t.value("beta1", c.train.beta1);
    c.train.beta2 = t.value("beta2", c.train.beta2);
    c.train.eps = t.value("eps", c.train.eps);
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.alpha = t.value("alpha", c.train.alpha);
    c.train.temperature = t.value("temperature", c.train.temperature);
    c.train.history_every = t.value("history_every", c.train.history_every);
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    reject_unknown_keys(s, {"warmup_frac", "ramp_frac", "cooldown_frac", "lambda_end"}, "schedule");
    c.schedule.warmup_frac = s.value("warmup_frac", c.schedule.warmup_frac);
    c.schedule.ramp_frac = s.value("ramp_frac", c.schedule.ramp_frac);
    c.schedule.cooldown_frac = s.value("cooldown_frac", c.schedule.cooldown_frac);
    c.schedule.lambda_end = s.value("lambda_end", c.schedule.lambda_end);
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    reject_unknown_keys(s, {"lambda_list", "lambda_multipliers", "lambda_center", "block_sizes", "seeds"},
                        "sweep");
    c.lambda_list = s.value("lambda_list", c.lambda_list);
    c.lambda_multipliers = s.value("lambda_multipliers", c.lambda_multipliers);
    c.lambda_center = s.value("lambda_center", c.lambda_center);
    c.block_sizes = s.value("block_sizes", c.block_sizes);
    c.seeds = s.value("seeds", c.seeds);
  }
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    reject_unknown_keys(b, {"batch", "warmup", "reps"}, "bench");
    c.bench_batch = b.value("batch", c.bench_batch);
    c.bench_warmup = b.value("warmup", c.bench_warmup);
    c.bench_reps = b.value("reps", c.bench_reps);
  }
  c.fill_steps = j.value("fill_steps", c.fill_steps);
  c.out_dir = j.value("out", c.out_dir);
  c.teacher_dir = j.value("teacher_dir", c.teacher_dir);
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  json j;
  j["schema_version"] = 1;
  j["model"] = {{"d_model", model.d_model},     {"n_heads", model.n_heads},
                {"d_ff", model.d_ff},           {"n_layers", model.n_layers},
                {"vocab_size", model.vocab_size}, {"max_len", model.max_len},
                {"n_classes", model.n_classes},
                {"activation", model.activation == Activation::Relu ? "relu" : "gelu"},
                {"dropout", model.dropout}};
  j["task"] = {{"kind", task.kind},       {"train_size", task.train_size}, {"dev_size", task.dev_size},
               {"seed", task.seed},       {"seq_len", task.seq_len},       {"path", task.path}};
  j["method"] = {{"name", method_name(method)}, {"block_size", block_size}, {"tied_heads", tied_heads}};
  j["train"] = {{"epochs", train.epochs},
                {"teacher_epochs", teacher_epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"score_lr", train.score_lr},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"eps", train.eps},
                {"weight_decay", train.weight_decay},
                {"alpha", train.alpha},
                {"temperature", train.temperature},
                {"history_every", train.history_every}};
  j["schedule"] = {{"warmup_frac", schedule.warmup_frac},
                   {"ramp_frac", schedule.ramp_frac},
                   {"cooldown_frac", schedule.cooldown_frac},
                   {"lambda_end", schedule.lambda_end}};
  j["sweep"] = {{"lambda_list", lambda_list},
                {"lambda_multipliers", lambda_multipliers},
                {"lambda_center", lambda_center},
                {"block_sizes", block_sizes},
                {"seeds", seeds}};
  j["bench"] = {{"batch", bench_batch}, {"warmup", bench_warmup}, {"reps", bench_reps}};
  j["fill_steps"] = fill_steps;
  j["out"] = out_dir;
  j["teacher_dir"] = teacher_dir;
  return j;
}

void RunConfig::validate() const {
  model.validate();
  task.validate();
  schedule.validate();
  if (task.seq_len > model.max_len) throw ContractError("config: task seq_len exceeds model max_len");
  if (train.epochs < 0 || teacher_epochs < 0) throw ContractError("config: epochs must be >= 0");
  if (train.batch_size <= 0) throw ContractError("config: batch_size must be positive");
  if (train.alpha < 0 || train.alpha > 1) throw ContractError("config: alpha must be in [0, 1]");
  if (train.temperature <= 0) throw ContractError("config: temperature must be positive");
  if (block_size <= 0) throw ContractError("config: block_size must be positive");
  if (seeds.empty()) throw ContractError("config: at least one seed required");
  if (bench_batch <= 0 || bench_reps <= 0) throw ContractError("config: bench batch/reps must be positive");
  for (double l : lambda_list)
    if (l < 0) throw ContractError("config: lambda values must be >= 0");
  for (std::int64_t b : block_sizes)
    if (b <= 0) throw ContractError("config: block sizes must be positive");
}

}  // namespace blockprune
