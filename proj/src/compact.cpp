#include "blockprune/compact.hpp"

#include <cmath>

namespace blockprune {

namespace {

// Model copy with every prunable weight replaced by its masked value.
Model materialize_effective(const Model& model, const MaskSet& masks) {
  Model out = model;
  if (masks.empty()) return out;
  for (std::size_t li = 0; li < out.layers.size(); ++li)
    for (Family f : kFamilies) {
      const Tensor<float>* m = masks.find(static_cast<std::int64_t>(li), f);
      if (m) out.layers[li].lin(f).w = k_mul(out.layers[li].lin(f).w, *m);
    }
  return out;
}

bool head_nonempty(const Model& model, const MaskSet& masks, std::int64_t li, std::int64_t h) {
  const EncoderLayer& layer = model.layers[static_cast<std::size_t>(li)];
  const std::int64_t dh = layer.head_dim;
  for (Family f : {Family::Q, Family::K, Family::V, Family::O}) {
    const Tensor<float>& w = layer.lin(f).w;
    const Tensor<float>* m = masks.empty() ? nullptr : masks.find(li, f);
    const bool cols_slab = f == Family::O;
    const std::int64_t r0 = cols_slab ? 0 : h * dh, r1 = cols_slab ? w.extent(0) : (h + 1) * dh;
    const std::int64_t c0 = cols_slab ? h * dh : 0, c1 = cols_slab ? (h + 1) * dh : w.extent(1);
    for (std::int64_t i = r0; i < r1; ++i)
      for (std::int64_t j = c0; j < c1; ++j) {
        const float eff = m ? w(i, j) * (*m)(i, j) : w(i, j);
        if (eff != 0.0f) return true;
      }
  }
  return false;
}

bool dim_empty(const Model& model, const MaskSet& masks, std::int64_t li, std::int64_t j) {
  const EncoderLayer& layer = model.layers[static_cast<std::size_t>(li)];
  const Tensor<float>& w1 = layer.ffn1.w;
  const Tensor<float>& w2 = layer.ffn2.w;
  const Tensor<float>* m1 = masks.empty() ? nullptr : masks.find(li, Family::Ffn1);
  const Tensor<float>* m2 = masks.empty() ? nullptr : masks.find(li, Family::Ffn2);
  for (std::int64_t c = 0; c < w1.extent(1); ++c) {
    const float eff = m1 ? w1(j, c) * (*m1)(j, c) : w1(j, c);
    if (eff != 0.0f) return false;
  }
  for (std::int64_t r = 0; r < w2.extent(0); ++r) {
    const float eff = m2 ? w2(r, j) * (*m2)(r, j) : w2(r, j);
    if (eff != 0.0f) return false;
  }
  return true;
}

double dim_salience(const Model& model, const PruneState* prune, std::int64_t li, std::int64_t j) {
  if (prune) {
    const ScoreGroup* g = prune->group_for(li, Family::Ffn1);
    if (g && g->scores.numel() == model.layers[static_cast<std::size_t>(li)].d_ff())
      return static_cast<double>(g->scores[j]);
  }
  const EncoderLayer& layer = model.layers[static_cast<std::size_t>(li)];
  double acc = 0;
  for (std::int64_t c = 0; c < layer.ffn1.w.extent(1); ++c) acc += std::abs(layer.ffn1.w(j, c));
  for (std::int64_t r = 0; r < layer.ffn2.w.extent(0); ++r) acc += std::abs(layer.ffn2.w(r, j));
  return acc;
}

double head_salience(const Model& model, const PruneState* prune, std::int64_t li, std::int64_t h) {
  const EncoderLayer& layer = model.layers[static_cast<std::size_t>(li)];
  if (prune) {
    const ScoreGroup* g = prune->group_for(li, Family::Q);
    if (g && g->scores.numel() == layer.n_heads) return static_cast<double>(g->scores[h]);
  }
  const std::int64_t dh = layer.head_dim;
  double acc = 0;
  for (Family f : {Family::Q, Family::K, Family::V, Family::O}) {
    const Tensor<float>& w = layer.lin(f).w;
    const bool cols_slab = f == Family::O;
    const std::int64_t r0 = cols_slab ? 0 : h * dh, r1 = cols_slab ? w.extent(0) : (h + 1) * dh;
    const std::int64_t c0 = cols_slab ? h * dh : 0, c1 = cols_slab ? (h + 1) * dh : w.extent(1);
    for (std::int64_t i = r0; i < r1; ++i)
      for (std::int64_t j = c0; j < c1; ++j) acc += std::abs(w(i, j));
  }
  return acc;
}

}  // namespace

CompactPlan plan_compaction(const Model& model, const MaskSet& masks, const PruneState* prune) {
  CompactPlan plan;
  plan.layers.resize(model.layers.size());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const EncoderLayer& layer = model.layers[li];
    auto& pl = plan.layers[li];
    for (std::int64_t j = 0; j < layer.d_ff(); ++j)
      if (!dim_empty(model, masks, static_cast<std::int64_t>(li), j)) pl.kept_dims.push_back(j);
    for (std::int64_t h = 0; h < layer.n_heads; ++h)
      if (head_nonempty(model, masks, static_cast<std::int64_t>(li), h)) pl.kept_heads.push_back(h);
    if (pl.kept_dims.empty()) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < layer.d_ff(); ++j)
        if (dim_salience(model, prune, static_cast<std::int64_t>(li), j) >
            dim_salience(model, prune, static_cast<std::int64_t>(li), best))
          best = j;
      pl.kept_dims.push_back(best);
    }
    if (pl.kept_heads.empty()) {
      std::int64_t best = 0;
      for (std::int64_t h = 1; h < layer.n_heads; ++h)
        if (head_salience(model, prune, static_cast<std::int64_t>(li), h) >
            head_salience(model, prune, static_cast<std::int64_t>(li), best))
          best = h;
      pl.kept_heads.push_back(best);
    }
  }
  return plan;
}

namespace {

void validate_plan(const Model& model, const CompactPlan& plan) {
  if (plan.layers.size() != model.layers.size()) throw ShapeError("plan does not match model layer count");
  for (std::size_t li = 0; li < plan.layers.size(); ++li) {
    const auto& pl = plan.layers[li];
    const EncoderLayer& layer = model.layers[li];
    if (pl.kept_dims.empty() || pl.kept_heads.empty())
      throw ShapeError("plan must keep at least one dim and one head per layer");
    for (std::size_t i = 0; i < pl.kept_dims.size(); ++i) {
      if (pl.kept_dims[i] < 0 || pl.kept_dims[i] >= layer.d_ff()) throw ShapeError("plan FFN dim out of range");
      if (i > 0 && pl.kept_dims[i] <= pl.kept_dims[i - 1]) throw ShapeError("plan dims must be sorted unique");
    }
    for (std::size_t i = 0; i < pl.kept_heads.size(); ++i) {
      if (pl.kept_heads[i] < 0 || pl.kept_heads[i] >= layer.n_heads) throw ShapeError("plan head out of range");
      if (i > 0 && pl.kept_heads[i] <= pl.kept_heads[i - 1]) throw ShapeError("plan heads must be sorted unique");
    }
  }
}

// Crop an effective-weight model down to the plan.
Model crop(const Model& eff, const CompactPlan& plan) {
  Model out;
  out.cfg = eff.cfg;
  out.tok_emb = eff.tok_emb;
  out.pos_emb = eff.pos_emb;
  out.ln_emb_g = eff.ln_emb_g;
  out.ln_emb_b = eff.ln_emb_b;
  out.cls = eff.cls;
  out.layers.resize(eff.layers.size());
  for (std::size_t li = 0; li < eff.layers.size(); ++li) {
    const EncoderLayer& src = eff.layers[li];
    const auto& pl = plan.layers[li];
    EncoderLayer& dst = out.layers[li];
    const std::int64_t dh = src.head_dim;
    const std::int64_t d = src.o.w.extent(0);
    const std::int64_t kept_h = static_cast<std::int64_t>(pl.kept_heads.size());
    const std::int64_t kept_d = static_cast<std::int64_t>(pl.kept_dims.size());

    dst.n_heads = kept_h;
    dst.head_dim = dh;
    dst.ln1_g = src.ln1_g;
    dst.ln1_b = src.ln1_b;
    dst.ln2_g = src.ln2_g;
    dst.ln2_b = src.ln2_b;

    for (Family f : {Family::Q, Family::K, Family::V}) {
      const PrunableLinear& s = src.lin(f);
      PrunableLinear& t = dst.lin(f);
      t.w = Tensor<float>({kept_h * dh, s.w.extent(1)});
      t.b = Tensor<float>({kept_h * dh});
      for (std::int64_t hi = 0; hi < kept_h; ++hi) {
        const std::int64_t h = pl.kept_heads[static_cast<std::size_t>(hi)];
        for (std::int64_t r = 0; r < dh; ++r) {
          for (std::int64_t c = 0; c < s.w.extent(1); ++c) t.w(hi * dh + r, c) = s.w(h * dh + r, c);
          t.b[hi * dh + r] = s.b[h * dh + r];
        }
      }
    }
    dst.o.w = Tensor<float>({d, kept_h * dh});
    dst.o.b = src.o.b;
    for (std::int64_t r = 0; r < d; ++r)
      for (std::int64_t hi = 0; hi < kept_h; ++hi) {
        const std::int64_t h = pl.kept_heads[static_cast<std::size_t>(hi)];
        for (std::int64_t c = 0; c < dh; ++c) dst.o.w(r, hi * dh + c) = src.o.w(r, h * dh + c);
      }

    dst.ffn1.w = Tensor<float>({kept_d, src.ffn1.w.extent(1)});
    dst.ffn1.b = Tensor<float>({kept_d});
    for (std::int64_t ji = 0; ji < kept_d; ++ji) {
      const std::int64_t j = pl.kept_dims[static_cast<std::size_t>(ji)];
      for (std::int64_t c = 0; c < src.ffn1.w.extent(1); ++c) dst.ffn1.w(ji, c) = src.ffn1.w(j, c);
      dst.ffn1.b[ji] = src.ffn1.b[j];
    }
    dst.ffn2.w = Tensor<float>({src.ffn2.w.extent(0), kept_d});
    dst.ffn2.b = src.ffn2.b;
    for (std::int64_t r = 0; r < src.ffn2.w.extent(0); ++r)
      for (std::int64_t ji = 0; ji < kept_d; ++ji)
        dst.ffn2.w(r, ji) = src.ffn2.w(r, pl.kept_dims[static_cast<std::size_t>(ji)]);
  }
  return out;
}

}  // namespace

Model compact(const Model& model, const MaskSet& masks, const CompactPlan& plan) {
  validate_plan(model, plan);
  return crop(materialize_effective(model, masks), plan);
}

double verify_equivalence(const Model& masked_model, const MaskSet& masks, const Model& compact_model,
                          int n_batches, std::int64_t batch, std::int64_t seq_len, Rng& rng, double bound) {
  double max_diff = 0.0;
  for (int r = 0; r < n_batches; ++r) {
    Tensor<std::int32_t> ids({batch, seq_len});
    for (std::int64_t i = 0; i < ids.numel(); ++i)
      ids[i] = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(masked_model.cfg.vocab_size)));
    Tensor<float> a = forward_logits(masked_model, ids, masks.empty() ? nullptr : &masks);
    Tensor<float> b = forward_logits(compact_model, ids);
    for (std::int64_t i = 0; i < a.numel(); ++i)
      max_diff = std::max(max_diff, static_cast<double>(std::abs(a[i] - b[i])));
  }
  if (max_diff > bound)
    throw EquivalenceError("compacted model deviates from masked model by " + std::to_string(max_diff));
  return max_diff;
}

Model compact_filled(const Model& model, const MaskSet& masks, const CompactPlan& plan, Rng& rng,
                     MaskSet* touched) {
  validate_plan(model, plan);
  Model eff = materialize_effective(model, masks);
  if (touched) *touched = MaskSet::sized(static_cast<std::int64_t>(model.layers.size()));

  for (std::size_t li = 0; li < eff.layers.size(); ++li) {
    EncoderLayer& layer = eff.layers[li];
    const auto& pl = plan.layers[li];
    const std::int64_t dh = layer.head_dim;
    const std::int64_t kept_h = static_cast<std::int64_t>(pl.kept_heads.size());
    const std::int64_t kept_d = static_cast<std::int64_t>(pl.kept_dims.size());

    auto redraw = [&](Family f, Tensor<float>& w, std::int64_t i, std::int64_t j, std::int64_t fan_in) {
      const Tensor<float>* m = masks.empty() ? nullptr : masks.find(static_cast<std::int64_t>(li), f);
      if (!m || (*m)(i, j) != 0.0f) return;
      const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
      w(i, j) = static_cast<float>(rng.uniform(-bound, bound));
      if (touched) {
        Tensor<float>& tm = touched->at(static_cast<std::int64_t>(li), f);
        if (tm.empty()) tm = Tensor<float>::zeros(w.shape());
        tm(i, j) = 1.0f;
      }
    };

    for (Family f : {Family::Q, Family::K, Family::V}) {
      Tensor<float>& w = layer.lin(f).w;
      for (const std::int64_t h : pl.kept_heads)
        for (std::int64_t r = h * dh; r < (h + 1) * dh; ++r)
          for (std::int64_t c = 0; c < w.extent(1); ++c) redraw(f, w, r, c, w.extent(1));
    }
    {
      Tensor<float>& w = layer.o.w;
      for (std::int64_t r = 0; r < w.extent(0); ++r)
        for (const std::int64_t h : pl.kept_heads)
          for (std::int64_t c = h * dh; c < (h + 1) * dh; ++c) redraw(Family::O, w, r, c, kept_h * dh);
    }
    {
      Tensor<float>& w = layer.ffn1.w;
      for (const std::int64_t j : pl.kept_dims)
        for (std::int64_t c = 0; c < w.extent(1); ++c) redraw(Family::Ffn1, w, j, c, w.extent(1));
    }
    {
      Tensor<float>& w = layer.ffn2.w;
      for (std::int64_t r = 0; r < w.extent(0); ++r)
        for (const std::int64_t j : pl.kept_dims) redraw(Family::Ffn2, w, r, j, kept_d);
    }
  }
  return crop(eff, plan);
}

ProtectionMask rewind_protection(const CompactPlan& plan, const Model& model) {
  ProtectionMask p;
  p.kept_heads.resize(model.layers.size());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    p.kept_heads[li].assign(static_cast<std::size_t>(model.layers[li].n_heads), false);
    for (const std::int64_t h : plan.layers[li].kept_heads) p.kept_heads[li][static_cast<std::size_t>(h)] = true;
  }
  return p;
}

void apply_protection(PruneState& prune, const ProtectionMask& protection, const Model& model) {
  if (protection.kept_heads.size() != model.layers.size())
    throw ShapeError("protection mask does not match model layer count");
  for (ScoreGroup& g : prune.groups) {
    if (!g.attention) continue;
    if (g.protected_entries.empty()) g.protected_entries.assign(static_cast<std::size_t>(g.scores.numel()), 0);
    for (const ScoreGroup::Member& m : g.members) {
      const EncoderLayer& layer = model.layers[static_cast<std::size_t>(m.layer)];
      const std::int64_t dh = layer.head_dim;
      const Tensor<float>& w = layer.lin(m.family).w;
      const std::int64_t grid_cols = m.geom.grid_cols(w.extent(1));
      const std::int64_t grid_rows = m.geom.grid_rows(w.extent(0));
      for (std::int64_t h = 0; h < layer.n_heads; ++h) {
        if (!protection.kept_heads[static_cast<std::size_t>(m.layer)][static_cast<std::size_t>(h)]) continue;
        const bool cols_slab = m.family == Family::O;
        // mark every score entry whose block overlaps the protected slab
        const std::int64_t lo = h * dh, hi = (h + 1) * dh - 1;
        if (cols_slab) {
          const std::int64_t g0 = lo / m.geom.block_cols, g1 = hi / m.geom.block_cols;
          for (std::int64_t gi = 0; gi < grid_rows; ++gi)
            for (std::int64_t gj = g0; gj <= g1; ++gj)
              g.protected_entries[static_cast<std::size_t>(gi * grid_cols + gj)] = 1;
        } else {
          const std::int64_t g0 = lo / m.geom.block_rows, g1 = hi / m.geom.block_rows;
          for (std::int64_t gi = g0; gi <= g1; ++gi)
            for (std::int64_t gj = 0; gj < grid_cols; ++gj)
              g.protected_entries[static_cast<std::size_t>(gi * grid_cols + gj)] = 1;
        }
      }
    }
  }
}

}  // namespace blockprune
