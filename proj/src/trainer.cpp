#include "blockprune/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "blockprune/adam.hpp"

namespace blockprune {

void PruneSchedule::validate() const {
  if (warmup_frac < 0 || ramp_frac < 0 || cooldown_frac < 0)
    throw ContractError("schedule: fractions must be non-negative");
  if (warmup_frac + ramp_frac + cooldown_frac > 1.0 + 1e-9)
    throw ContractError("schedule: warmup + ramp + cooldown must be <= 1");
  if (lambda_end < 0) throw ContractError("schedule: lambda_end must be >= 0");
}

double schedule_lambda(std::int64_t step, std::int64_t total_steps, const PruneSchedule& sched) {
  if (total_steps <= 0) return 0.0;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  if (t < sched.warmup_frac) return 0.0;
  if (sched.ramp_frac <= 0.0) return sched.lambda_end;
  const double ramp_pos = (t - sched.warmup_frac) / sched.ramp_frac;
  if (ramp_pos >= 1.0) return sched.lambda_end;
  return sched.lambda_end * ramp_pos;
}

bool schedule_in_cooldown(std::int64_t step, std::int64_t total_steps, const PruneSchedule& sched) {
  if (total_steps <= 0 || sched.cooldown_frac <= 0.0) return false;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return t >= 1.0 - sched.cooldown_frac;
}

namespace {

Tensor<std::int32_t> batch_labels(const Dataset& data, const std::vector<std::int64_t>& index,
                                  std::int64_t from, std::int64_t to) {
  Tensor<std::int32_t> out({to - from});
  for (std::int64_t i = from; i < to; ++i)
    out[i - from] = data.labels[static_cast<std::size_t>(index[static_cast<std::size_t>(i)])];
  return out;
}

struct EvalChunk {
  std::int64_t correct = 0;
  double loss_sum = 0.0;
};

EvalChunk eval_range(const Model& model, const Dataset& data, const MaskSet* masks, std::int64_t from,
                     std::int64_t to) {
  EvalChunk out;
  constexpr std::int64_t kEvalBatch = 256;
  for (std::int64_t b = from; b < to; b += kEvalBatch) {
    const std::int64_t hi = std::min(to, b + kEvalBatch);
    Tensor<std::int32_t> ids = data.slice(b, hi);
    Tensor<float> logits = forward_logits(model, ids, masks);
    const std::int64_t C = logits.extent(1);
    Tensor<std::int32_t> labels({hi - b});
    for (std::int64_t i = b; i < hi; ++i) labels[i - b] = data.labels[static_cast<std::size_t>(i)];
    for (std::int64_t i = 0; i < hi - b; ++i) {
      std::int64_t arg = 0;
      for (std::int64_t j = 1; j < C; ++j)
        if (logits(i, j) > logits(i, arg)) arg = j;
      if (arg == labels[i]) ++out.correct;
    }
    out.loss_sum += static_cast<double>(k_cross_entropy(logits, labels)[0]) * static_cast<double>(hi - b);
  }
  return out;
}

}  // namespace

EvalResult evaluate(const Model& model, const Dataset& data, const MaskSet* masks, int threads) {
  const std::int64_t n = data.size();
  if (n == 0) throw ContractError("evaluate: empty dataset");
  EvalResult r;
  if (threads <= 1) {
    const EvalChunk c = eval_range(model, data, masks, 0, n);
    r.accuracy = static_cast<double>(c.correct) / static_cast<double>(n);
    r.loss = c.loss_sum / static_cast<double>(n);
    return r;
  }
  const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
  std::vector<EvalChunk> chunks(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  const std::int64_t per = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t from = w * per, to = std::min<std::int64_t>(n, (w + 1) * per);
    if (from >= to) break;
    pool.emplace_back([&, w, from, to] { chunks[static_cast<std::size_t>(w)] = eval_range(model, data, masks, from, to); });
  }
  for (auto& t : pool) t.join();
  std::int64_t correct = 0;
  double loss = 0.0;
  for (const EvalChunk& c : chunks) {  // fixed combine order
    correct += c.correct;
    loss += c.loss_sum;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.loss = loss / static_cast<double>(n);
  return r;
}

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw RunError("cannot write " + path);
    out << "step,lambda,density,head_compression,accuracy,loss\n";
    for (const HistoryRow& r : rows) {
      char buf[192];
      std::snprintf(buf, sizeof buf, "%lld,%.8g,%.8g,%.8g,%.8g,%.8g\n", static_cast<long long>(r.step),
                    r.lambda, r.density, r.head_compression, r.accuracy, r.loss);
      out << buf;
    }
  }
  std::filesystem::rename(tmp, path);
}

namespace {

struct LoopState {
  std::vector<Model::ParamRef> params;
  std::vector<AdamState<float>> states;
  std::vector<AdamState<float>> score_states;
};

// One training loop for both plain fine-tuning and fine-pruning. With
// prune == nullptr (or lambda_end == 0) the weight updates are arithmetic-
// identical to the dense path: all-ones masks multiply by exactly 1 and the
// scores never step.
void run_training(Model& model, PruneState* prune, const Model* teacher, const Dataset& train,
                  const Dataset& dev, const PruneSchedule& schedule, const TrainOptions& opts,
                  std::vector<HistoryRow>* history, Model* best_model, double* best_accuracy) {
  if (train.size() == 0) throw ContractError("train: empty dataset");
  schedule.validate();
  if (opts.alpha < 0 || opts.alpha > 1) throw ContractError("train: alpha must be in [0, 1]");
  const std::int64_t n = train.size();
  const std::int64_t bs = std::min<std::int64_t>(opts.batch_size, n);
  const std::int64_t steps_per_epoch = (n + bs - 1) / bs;
  const std::int64_t total_steps = opts.epochs * steps_per_epoch;

  LoopState ls;
  ls.params = model.params();
  for (auto& p : ls.params) ls.states.push_back(AdamState<float>::like(*p.tensor));
  if (prune)
    for (auto& g : prune->groups) ls.score_states.push_back(AdamState<float>::like(g.scores));

  const AdamConfig<float> weight_cfg_base{static_cast<float>(opts.lr), static_cast<float>(opts.beta1),
                                          static_cast<float>(opts.beta2), static_cast<float>(opts.eps), 0.0f};
  const AdamConfig<float> score_cfg{static_cast<float>(opts.score_lr), static_cast<float>(opts.beta1),
                                    static_cast<float>(opts.beta2), static_cast<float>(opts.eps), 0.0f};

  Rng root(opts.seed);
  Rng shuffle_rng = root.fork(101);
  Rng dropout_rng = root.fork(102);

  std::vector<std::int64_t> index(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) index[static_cast<std::size_t>(i)] = i;

  const bool distill = teacher != nullptr && opts.alpha < 1.0;
  double last_accuracy = 0.0;

  for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = static_cast<std::int64_t>(shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      std::swap(index[static_cast<std::size_t>(i)], index[static_cast<std::size_t>(j)]);
    }
    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      const std::int64_t step = epoch * steps_per_epoch + b;
      const std::int64_t lo = b * bs, hi = std::min(n, lo + bs);
      const double lam = prune ? schedule_lambda(step, total_steps, schedule) : 0.0;
      if (prune && schedule_in_cooldown(step, total_steps, schedule) && !prune->frozen) prune->freeze(model);
      const bool scores_active = prune && lam > 0.0 && !prune->frozen;

      Tensor<std::int32_t> ids = train.rows(index, lo, hi);
      Tensor<std::int32_t> labels = batch_labels(train, index, lo, hi);

      Tape<float> tape;
      TapeBinder bind(tape);
      ForwardOptions fo;
      fo.train = true;
      fo.apply_masks = prune != nullptr;
      fo.dropout_rng = &dropout_rng;
      Var logits = model_forward_tape(tape, bind, model, prune, ids, fo);

      Var loss = cross_entropy(tape, logits, labels);
      if (distill) {
        Tensor<float> tlogits = forward_logits(*teacher, ids);
        Var kl = kl_distill(tape, logits, tlogits, static_cast<float>(opts.temperature));
        loss = add_scaled(tape, loss, static_cast<float>(opts.alpha), kl, static_cast<float>(1.0 - opts.alpha));
      }
      double regv = 0.0;
      if (prune && lam > 0.0)
        for (const ScoreGroup& g : prune->groups)
          regv += reg_value(g.scores, lam * (g.attention ? prune->reg.lambda_att : prune->reg.lambda_ffn));
      loss = add_const(tape, loss, static_cast<float>(regv));

      const double loss_val = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(loss_val)) throw RunError("training diverged at step " + std::to_string(step));

      tape.backward(loss);

      for (std::size_t pi = 0; pi < ls.params.size(); ++pi) {
        Tensor<float>& param = *ls.params[pi].tensor;
        Var v = bind(param);
        const Tensor<float>* g = tape.grad(v);
        AdamConfig<float> cfg = weight_cfg_base;
        cfg.weight_decay = ls.params[pi].decay ? static_cast<float>(opts.weight_decay) : 0.0f;
        if (g)
          adam_step(param, *g, ls.states[pi], cfg);
        else
          adam_step(param, Tensor<float>::zeros(param.shape()), ls.states[pi], cfg);
      }

      if (scores_active) {
        for (std::size_t gi = 0; gi < prune->groups.size(); ++gi) {
          ScoreGroup& group = prune->groups[gi];
          const double fam = group.attention ? prune->reg.lambda_att : prune->reg.lambda_ffn;
          Var sv = bind(group.scores);
          const Tensor<float>* task = tape.grad(sv);
          Tensor<float> total = reg_grad(group.scores, lam * fam);
          if (task)
            for (std::int64_t i = 0; i < total.numel(); ++i) total[i] += (*task)[i];
          adam_step(group.scores, total, ls.score_states[gi], score_cfg);
          if (!group.protected_entries.empty())
            for (std::int64_t i = 0; i < group.scores.numel(); ++i)
              if (group.protected_entries[static_cast<std::size_t>(i)] && group.scores[i] < prune->s0)
                group.scores[i] = prune->s0;
        }
      }

      if (history && opts.history_every > 0 && step % opts.history_every == 0) {
        MaskSet masks = prune ? prune->masks(model) : MaskSet{};
        const DensityReport dr = density_report(model, prune ? &masks : nullptr);
        history->push_back({step, lam, dr.density, dr.head_compression, last_accuracy, loss_val});
      }
    }

    MaskSet masks = prune ? prune->masks(model) : MaskSet{};
    const EvalResult ev = evaluate(model, dev, prune ? &masks : nullptr);
    last_accuracy = ev.accuracy;
    const DensityReport dr = density_report(model, prune ? &masks : nullptr);
    if (history)
      history->push_back(
          {(epoch + 1) * steps_per_epoch - 1, prune ? schedule_lambda((epoch + 1) * steps_per_epoch - 1, total_steps, schedule) : 0.0,
           dr.density, dr.head_compression, ev.accuracy, ev.loss});
    if (best_model && best_accuracy && ev.accuracy > *best_accuracy) {
      *best_accuracy = ev.accuracy;
      *best_model = model;
    }
    if (opts.verbose)
      std::printf("epoch %lld/%lld  acc %.4f  loss %.4f  density %.3f\n", static_cast<long long>(epoch + 1),
                  static_cast<long long>(opts.epochs), ev.accuracy, ev.loss, dr.density);
  }
}

}  // namespace

Model train_dense(const ModelConfig& cfg, const Dataset& train, const Dataset& dev, const TrainOptions& opts) {
  if (train.size() == 0) throw ContractError("train_dense: empty dataset");
  Rng root(opts.seed);
  Rng init_rng = root.fork(0);
  Model model = Model::init(cfg, init_rng);
  if (opts.epochs == 0) return model;
  run_training(model, nullptr, nullptr, train, dev, PruneSchedule{}, opts, nullptr, nullptr, nullptr);
  return model;
}

TrainResult fine_prune(const FinePruneRun& run, const Model& start, PruneState prune, const Model* teacher,
                       const Dataset& train, const Dataset& dev) {
  TrainResult result;
  result.model = start;
  result.prune = std::move(prune);
  result.best_model = start;
  result.best_accuracy = -1.0;
  run_training(result.model, &result.prune, teacher, train, dev, run.schedule, run.opts, &result.history,
               &result.best_model, &result.best_accuracy);
  MaskSet masks = result.prune.masks(result.model);
  result.final_eval = evaluate(result.model, dev, &masks);
  return result;
}

void finetune_compact(Model& model, const Model* teacher, const Dataset& train, const TrainOptions& opts,
                      std::int64_t steps) {
  if (steps <= 0) return;
  const std::int64_t n = train.size();
  const std::int64_t bs = std::min<std::int64_t>(opts.batch_size, n);
  std::vector<Model::ParamRef> params = model.params();
  std::vector<AdamState<float>> states;
  for (auto& p : params) states.push_back(AdamState<float>::like(*p.tensor));
  Rng root(opts.seed);
  Rng shuffle_rng = root.fork(201);
  Rng dropout_rng = root.fork(202);
  std::vector<std::int64_t> index(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) index[static_cast<std::size_t>(i)] = i;
  const bool distill = teacher != nullptr && opts.alpha < 1.0;

  std::int64_t cursor = 0;
  for (std::int64_t step = 0; step < steps; ++step) {
    if (cursor + bs > n) cursor = 0;
    if (cursor == 0) {
      for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = static_cast<std::int64_t>(shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
        std::swap(index[static_cast<std::size_t>(i)], index[static_cast<std::size_t>(j)]);
      }
    }
    Tensor<std::int32_t> ids = train.rows(index, cursor, cursor + bs);
    Tensor<std::int32_t> labels = batch_labels(train, index, cursor, cursor + bs);
    cursor += bs;

    Tape<float> tape;
    TapeBinder bind(tape);
    ForwardOptions fo;
    fo.train = true;
    fo.dropout_rng = &dropout_rng;
    Var logits = model_forward_tape(tape, bind, model, nullptr, ids, fo);
    Var loss = cross_entropy(tape, logits, labels);
    if (distill) {
      Tensor<float> tlogits = forward_logits(*teacher, ids);
      Var kl = kl_distill(tape, logits, tlogits, static_cast<float>(opts.temperature));
      loss = add_scaled(tape, loss, static_cast<float>(opts.alpha), kl, static_cast<float>(1.0 - opts.alpha));
    }
    const double loss_val = static_cast<double>(tape.value(loss)[0]);
    if (!std::isfinite(loss_val)) throw RunError("fine-tuning diverged at step " + std::to_string(step));
    tape.backward(loss);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Tensor<float>& param = *params[pi].tensor;
      const Tensor<float>* g = tape.grad(bind(param));
      AdamConfig<float> cfg{static_cast<float>(opts.lr), static_cast<float>(opts.beta1),
                            static_cast<float>(opts.beta2), static_cast<float>(opts.eps),
                            params[pi].decay ? static_cast<float>(opts.weight_decay) : 0.0f};
      if (g)
        adam_step(param, *g, states[pi], cfg);
      else
        adam_step(param, Tensor<float>::zeros(param.shape()), states[pi], cfg);
    }
  }
}

}  // namespace blockprune
