#include "blockprune/model.hpp"

#include <cmath>
#include <limits>

namespace blockprune {

namespace {
constexpr float kLnEps = 1e-5f;

Tensor<std::int32_t> flat_ids(const Tensor<std::int32_t>& ids) {
  return ids.reshaped({ids.numel()});
}

Tensor<std::int32_t> position_ids(std::int64_t batch, std::int64_t len) {
  Tensor<std::int32_t> p({batch * len});
  for (std::int64_t i = 0; i < batch * len; ++i) p[i] = static_cast<std::int32_t>(i % len);
  return p;
}

Tensor<std::int32_t> first_token_rows(std::int64_t batch, std::int64_t len) {
  Tensor<std::int32_t> p({batch});
  for (std::int64_t b = 0; b < batch; ++b) p[b] = static_cast<std::int32_t>(b * len);
  return p;
}

PrunableLinear init_linear(std::int64_t out, std::int64_t in, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  return PrunableLinear{Tensor<float>::uniform({out, in}, rng, -bound, bound), Tensor<float>::zeros({out})};
}
}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0 || n_layers <= 0 || vocab_size <= 0 || max_len <= 0 ||
      n_classes <= 0)
    throw ContractError("model config: all extents must be positive");
  if (d_model % n_heads != 0) throw ContractError("model config: d_model must be divisible by n_heads");
  if (d_ff < d_model) throw ContractError("model config: d_ff must be >= d_model");
  if (dropout < 0.0f || dropout >= 1.0f) throw ContractError("model config: dropout must be in [0, 1)");
}

const char* family_name(Family f) {
  switch (f) {
    case Family::Q: return "q";
    case Family::K: return "k";
    case Family::V: return "v";
    case Family::O: return "o";
    case Family::Ffn1: return "ffn1";
    case Family::Ffn2: return "ffn2";
  }
  return "?";
}

PrunableLinear& EncoderLayer::lin(Family f) {
  switch (f) {
    case Family::Q: return q;
    case Family::K: return k;
    case Family::V: return v;
    case Family::O: return o;
    case Family::Ffn1: return ffn1;
    case Family::Ffn2: return ffn2;
  }
  throw ContractError("unknown family");
}

const PrunableLinear& EncoderLayer::lin(Family f) const {
  return const_cast<EncoderLayer*>(this)->lin(f);
}

Model Model::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const float emb_bound = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
  m.tok_emb = Tensor<float>::uniform({cfg.vocab_size, cfg.d_model}, rng, -emb_bound, emb_bound);
  m.pos_emb = Tensor<float>::uniform({cfg.max_len, cfg.d_model}, rng, -emb_bound, emb_bound);
  m.ln_emb_g = Tensor<float>::full({cfg.d_model}, 1.0f);
  m.ln_emb_b = Tensor<float>::zeros({cfg.d_model});
  m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& layer : m.layers) {
    layer.n_heads = cfg.n_heads;
    layer.head_dim = cfg.head_dim();
    layer.q = init_linear(cfg.d_model, cfg.d_model, rng);
    layer.k = init_linear(cfg.d_model, cfg.d_model, rng);
    layer.v = init_linear(cfg.d_model, cfg.d_model, rng);
    layer.o = init_linear(cfg.d_model, cfg.d_model, rng);
    layer.ffn1 = init_linear(cfg.d_ff, cfg.d_model, rng);
    layer.ffn2 = init_linear(cfg.d_model, cfg.d_ff, rng);
    layer.ln1_g = Tensor<float>::full({cfg.d_model}, 1.0f);
    layer.ln1_b = Tensor<float>::zeros({cfg.d_model});
    layer.ln2_g = Tensor<float>::full({cfg.d_model}, 1.0f);
    layer.ln2_b = Tensor<float>::zeros({cfg.d_model});
  }
  m.cls = init_linear(cfg.n_classes, cfg.d_model, rng);
  return m;
}

std::vector<Model::ParamRef> Model::params() {
  std::vector<ParamRef> out;
  out.push_back({"emb.tok", &tok_emb, true});
  out.push_back({"emb.pos", &pos_emb, true});
  out.push_back({"emb.ln.g", &ln_emb_g, false});
  out.push_back({"emb.ln.b", &ln_emb_b, false});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    EncoderLayer& l = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    for (Family f : kFamilies) {
      out.push_back({p + family_name(f) + ".w", &l.lin(f).w, true});
      out.push_back({p + family_name(f) + ".b", &l.lin(f).b, false});
    }
    out.push_back({p + "ln1.g", &l.ln1_g, false});
    out.push_back({p + "ln1.b", &l.ln1_b, false});
    out.push_back({p + "ln2.g", &l.ln2_g, false});
    out.push_back({p + "ln2.b", &l.ln2_b, false});
  }
  out.push_back({"cls.w", &cls.w, true});
  out.push_back({"cls.b", &cls.b, false});
  return out;
}

// ---------------------------------------------------------------------------
// Inference forward.
// ---------------------------------------------------------------------------

Tensor<float> forward_logits(const Model& model, const Tensor<std::int32_t>& ids, const MaskSet* masks) {
  if (ids.ndim() != 2) throw ShapeError("forward: ids must be [batch, len]");
  const std::int64_t B = ids.extent(0), L = ids.extent(1);
  if (L > model.cfg.max_len) throw ContractError("forward: sequence length exceeds max_len");

  Tensor<float> x = k_embedding(model.tok_emb, flat_ids(ids));
  {
    const std::int64_t d = model.cfg.d_model;
    for (std::int64_t r = 0; r < B * L; ++r) {
      const float* pos = model.pos_emb.data() + (r % L) * d;
      float* row = x.data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) row[j] += pos[j];
    }
  }
  x = k_layer_norm(x, model.ln_emb_g, model.ln_emb_b, kLnEps);

  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const EncoderLayer& layer = model.layers[li];
    auto eff = [&](Family f) -> Tensor<float> {
      const Tensor<float>& w = layer.lin(f).w;
      const Tensor<float>* m = masks ? masks->find(static_cast<std::int64_t>(li), f) : nullptr;
      return m ? k_mul(w, *m) : w;
    };
    const std::int64_t hd = layer.n_heads * layer.head_dim;
    Tensor<float> qm = k_linear(x, eff(Family::Q), layer.q.b).reshaped({B, L, hd});
    Tensor<float> km = k_linear(x, eff(Family::K), layer.k.b).reshaped({B, L, hd});
    Tensor<float> vm = k_linear(x, eff(Family::V), layer.v.b).reshaped({B, L, hd});
    Tensor<float> att = k_attention(qm, km, vm, layer.n_heads).reshaped({B * L, hd});
    Tensor<float> ao = k_linear(att, eff(Family::O), layer.o.b);
    x = k_layer_norm(k_add(x, ao), layer.ln1_g, layer.ln1_b, kLnEps);
    Tensor<float> h = k_linear(x, eff(Family::Ffn1), layer.ffn1.b);
    h = model.cfg.activation == Activation::Gelu ? k_gelu(h) : k_relu(h);
    Tensor<float> f = k_linear(h, eff(Family::Ffn2), layer.ffn2.b);
    x = k_layer_norm(k_add(x, f), layer.ln2_g, layer.ln2_b, kLnEps);
  }

  Tensor<float> pooled = k_embedding(x, first_token_rows(B, L));
  return k_linear(pooled, model.cls.w, model.cls.b);
}

// ---------------------------------------------------------------------------
// Pruning attachment.
// ---------------------------------------------------------------------------

Method parse_method(const std::string& name) {
  if (name == "block") return Method::Block;
  if (name == "hybrid") return Method::Hybrid;
  if (name == "hybrid-nt") return Method::HybridNT;
  if (name == "struct") return Method::Struct;
  if (name == "hybrid-filled") return Method::HybridFilled;
  if (name == "hybrid-filled-lt") return Method::HybridFilledLT;
  if (name == "none" || name.empty()) return Method::None;
  throw ContractError("unknown pruning method '" + name + "'");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::None: return "none";
    case Method::Block: return "block";
    case Method::Hybrid: return "hybrid";
    case Method::HybridNT: return "hybrid-nt";
    case Method::Struct: return "struct";
    case Method::HybridFilled: return "hybrid-filled";
    case Method::HybridFilledLT: return "hybrid-filled-lt";
  }
  return "?";
}

bool method_uses_teacher(Method m) { return m != Method::None && m != Method::HybridNT; }

bool method_uses_fill(Method m) { return m == Method::HybridFilled || m == Method::HybridFilledLT; }

const ScoreGroup* PruneState::group_for(std::int64_t layer, Family f, int* member) const {
  if (lookup.empty()) return nullptr;
  const auto [g, mi] = lookup[static_cast<std::size_t>(layer)][static_cast<std::size_t>(static_cast<int>(f))];
  if (g < 0) return nullptr;
  if (member) *member = mi;
  return &groups[static_cast<std::size_t>(g)];
}

MaskSet PruneState::masks(const Model& model) const {
  if (frozen) return frozen_masks;
  MaskSet out = MaskSet::sized(model.cfg.n_layers);
  for (const ScoreGroup& g : groups) {
    for (const ScoreGroup::Member& m : g.members) {
      const Tensor<float>& w = model.layers[static_cast<std::size_t>(m.layer)].lin(m.family).w;
      out.at(m.layer, m.family) = expand_mask(g.scores, tau, m.geom, w.extent(0), w.extent(1));
    }
  }
  return out;
}

void PruneState::freeze(const Model& model) {
  if (frozen) return;
  frozen_masks = masks(model);
  frozen = true;
}

namespace {

void add_group(PruneState& ps, ScoreGroup group) {
  const int gi = static_cast<int>(ps.groups.size());
  for (std::size_t mi = 0; mi < group.members.size(); ++mi) {
    const auto& m = group.members[mi];
    ps.lookup[static_cast<std::size_t>(m.layer)][static_cast<std::size_t>(static_cast<int>(m.family))] = {
        gi, static_cast<int>(mi)};
  }
  ps.groups.push_back(std::move(group));
}

}  // namespace

PruneState attach_patterns(const Model& model, const BlockPattern& att, const BlockPattern& ffn) {
  const ModelConfig& cfg = model.cfg;
  PruneState ps;
  ps.att_pattern = att;
  ps.ffn_pattern = ffn;
  ps.reg = balance_lambdas(1.0, att, ffn, cfg.d_model, cfg.n_heads);
  std::array<std::pair<int, int>, 6> none;
  none.fill({-1, -1});
  ps.lookup.assign(static_cast<std::size_t>(cfg.n_layers), none);

  auto grid_scores = [&](const MaskGeometry& geom, std::int64_t m, std::int64_t n) {
    geom.validate(m, n);
    return Tensor<float>::full({geom.grid_rows(m), geom.grid_cols(n)}, ps.s0);
  };

  for (std::int64_t li = 0; li < cfg.n_layers; ++li) {
    const EncoderLayer& layer = model.layers[static_cast<std::size_t>(li)];
    const std::int64_t d = cfg.d_model, dh = cfg.head_dim(), heads = cfg.n_heads, dff = cfg.d_ff;

    switch (att.kind) {
      case PatternKind::Unstructured:
      case PatternKind::Square: {
        const std::int64_t s = att.kind == PatternKind::Unstructured ? 1 : att.block_size;
        for (Family f : {Family::Q, Family::K, Family::V, Family::O}) {
          const Tensor<float>& w = layer.lin(f).w;
          MaskGeometry geom = MaskGeometry::square(s);
          ScoreGroup g;
          g.scores = grid_scores(geom, w.extent(0), w.extent(1));
          g.members = {{li, f, geom}};
          g.attention = true;
          add_group(ps, std::move(g));
        }
        break;
      }
      case PatternKind::HeadBlocks: {
        const MaskGeometry rows = MaskGeometry::full_rows(dh, d);
        const MaskGeometry cols = MaskGeometry::full_cols(d, dh);
        if (att.tied_heads) {
          ScoreGroup g;
          g.scores = Tensor<float>::full({heads}, ps.s0);
          g.members = {{li, Family::Q, rows}, {li, Family::K, rows}, {li, Family::V, rows}, {li, Family::O, cols}};
          g.attention = true;
          add_group(ps, std::move(g));
        } else {
          for (Family f : {Family::Q, Family::K, Family::V, Family::O}) {
            ScoreGroup g;
            g.scores = Tensor<float>::full({heads}, ps.s0);
            g.members = {{li, f, f == Family::O ? cols : rows}};
            g.attention = true;
            add_group(ps, std::move(g));
          }
        }
        break;
      }
      case PatternKind::DimPairedFFN:
        throw ContractError("dimension pairing applies to FFN families only");
    }

    switch (ffn.kind) {
      case PatternKind::Unstructured:
      case PatternKind::Square: {
        const std::int64_t s = ffn.kind == PatternKind::Unstructured ? 1 : ffn.block_size;
        for (Family f : {Family::Ffn1, Family::Ffn2}) {
          const Tensor<float>& w = layer.lin(f).w;
          MaskGeometry geom = MaskGeometry::square(s);
          ScoreGroup g;
          g.scores = grid_scores(geom, w.extent(0), w.extent(1));
          g.members = {{li, f, geom}};
          g.attention = false;
          add_group(ps, std::move(g));
        }
        break;
      }
      case PatternKind::DimPairedFFN: {
        ScoreGroup g;
        g.scores = Tensor<float>::full({dff}, ps.s0);
        g.members = {{li, Family::Ffn1, MaskGeometry::full_rows(1, d)},
                     {li, Family::Ffn2, MaskGeometry::full_cols(d, 1)}};
        g.attention = false;
        add_group(ps, std::move(g));
        break;
      }
      case PatternKind::HeadBlocks:
        throw ContractError("head blocks apply to attention families only");
    }
  }
  return ps;
}

PruneState attach_method(const Model& model, Method method, std::int64_t block_size, bool tied_heads) {
  BlockPattern att, ffn;
  switch (method) {
    case Method::Block:
      att = BlockPattern{block_size == 1 ? PatternKind::Unstructured : PatternKind::Square, block_size};
      ffn = att;
      break;
    case Method::Hybrid:
    case Method::HybridNT:
    case Method::HybridFilled:
    case Method::HybridFilledLT:
      att = BlockPattern{PatternKind::Square, block_size};
      ffn = BlockPattern{PatternKind::DimPairedFFN};
      break;
    case Method::Struct:
      att = BlockPattern{PatternKind::HeadBlocks, 0, tied_heads};
      ffn = BlockPattern{PatternKind::DimPairedFFN};
      break;
    case Method::None:
      throw ContractError("attach_method: no pruning method selected");
  }
  PruneState ps = attach_patterns(model, att, ffn);
  ps.method = method;
  return ps;
}

// ---------------------------------------------------------------------------
// Census and density.
// ---------------------------------------------------------------------------

Census linear_param_census(const Model& model, const MaskSet* masks) {
  Census c;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    for (Family f : kFamilies) {
      const Tensor<float>& w = model.layers[li].lin(f).w;
      const Tensor<float>* m = masks ? masks->find(static_cast<std::int64_t>(li), f) : nullptr;
      std::int64_t nz = 0;
      for (std::int64_t i = 0; i < w.numel(); ++i) {
        const float eff = m ? w[i] * (*m)[i] : w[i];
        if (eff != 0.0f) ++nz;
      }
      const auto fi = static_cast<std::size_t>(static_cast<int>(f));
      c.family_total[fi] += w.numel();
      c.family_nonzero[fi] += nz;
      c.total += w.numel();
      c.nonzero += nz;
    }
  }
  return c;
}

DensityReport density_report(const Model& model, const MaskSet* masks) {
  DensityReport r;
  const Census c = linear_param_census(model, masks);
  r.density = c.total > 0 ? static_cast<double>(c.nonzero) / static_cast<double>(c.total) : 1.0;
  for (std::size_t i = 0; i < 6; ++i)
    r.family_density[i] = c.family_total[i] > 0
                              ? static_cast<double>(c.family_nonzero[i]) / static_cast<double>(c.family_total[i])
                              : 1.0;

  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const EncoderLayer& layer = model.layers[li];
    const std::int64_t dh = layer.head_dim;
    for (std::int64_t h = 0; h < layer.n_heads; ++h) {
      ++r.total_heads;
      bool nonempty = false;
      for (Family f : {Family::Q, Family::K, Family::V, Family::O}) {
        const Tensor<float>& w = layer.lin(f).w;
        const Tensor<float>* m = masks ? masks->find(static_cast<std::int64_t>(li), f) : nullptr;
        const bool cols_slab = f == Family::O;
        const std::int64_t r0 = cols_slab ? 0 : h * dh, r1 = cols_slab ? w.extent(0) : (h + 1) * dh;
        const std::int64_t c0 = cols_slab ? h * dh : 0, c1 = cols_slab ? (h + 1) * dh : w.extent(1);
        for (std::int64_t i = r0; i < r1 && !nonempty; ++i)
          for (std::int64_t j = c0; j < c1; ++j) {
            const float eff = m ? w(i, j) * (*m)(i, j) : w(i, j);
            if (eff != 0.0f) {
              nonempty = true;
              break;
            }
          }
        if (nonempty) break;
      }
      if (nonempty) ++r.nonempty_heads;
    }
  }
  r.head_compression =
      static_cast<double>(r.total_heads) / static_cast<double>(std::max<std::int64_t>(r.nonempty_heads, 1));
  return r;
}

// ---------------------------------------------------------------------------
// Tape forward.
// ---------------------------------------------------------------------------

Var TapeBinder::operator()(const Tensor<float>& t) {
  for (const auto& [ptr, var] : bound_)
    if (ptr == &t) return var;
  Var v = tape_->leaf(t);
  bound_.emplace_back(&t, v);
  return v;
}

Var model_forward_tape(Tape<float>& tape, TapeBinder& bind, const Model& model, const PruneState* prune,
                       const Tensor<std::int32_t>& ids, const ForwardOptions& opts) {
  if (ids.ndim() != 2) throw ShapeError("forward: ids must be [batch, len]");
  const std::int64_t B = ids.extent(0), L = ids.extent(1);
  if (L > model.cfg.max_len) throw ContractError("forward: sequence length exceeds max_len");
  const float drop = opts.train ? model.cfg.dropout : 0.0f;
  if (drop > 0.0f && !opts.dropout_rng) throw ContractError("forward: dropout requires an rng");

  auto eff = [&](std::int64_t li, Family f) -> Var {
    const PrunableLinear& pl = model.layers[static_cast<std::size_t>(li)].lin(f);
    Var wv = bind(pl.w);
    if (!opts.apply_masks || !prune) return wv;
    int member = -1;
    const ScoreGroup* g = prune->group_for(li, f, &member);
    if (!g) return wv;
    if (prune->frozen) return masked(tape, wv, *prune->frozen_masks.find(li, f));
    return masked_st(tape, wv, bind(g->scores), g->members[static_cast<std::size_t>(member)].geom, prune->tau);
  };

  Var x = embedding(tape, bind(model.tok_emb), flat_ids(ids));
  x = add(tape, x, embedding(tape, bind(model.pos_emb), position_ids(B, L)));
  x = layer_norm(tape, x, bind(model.ln_emb_g), bind(model.ln_emb_b), kLnEps);
  if (drop > 0.0f) x = dropout(tape, x, drop, *opts.dropout_rng);

  for (std::int64_t li = 0; li < model.cfg.n_layers; ++li) {
    const EncoderLayer& layer = model.layers[static_cast<std::size_t>(li)];
    const std::int64_t hd = layer.n_heads * layer.head_dim;
    Var qm = reshape(tape, linear(tape, x, eff(li, Family::Q), bind(layer.q.b)), {B, L, hd});
    Var km = reshape(tape, linear(tape, x, eff(li, Family::K), bind(layer.k.b)), {B, L, hd});
    Var vm = reshape(tape, linear(tape, x, eff(li, Family::V), bind(layer.v.b)), {B, L, hd});
    Var att = reshape(tape, attention(tape, qm, km, vm, layer.n_heads), {B * L, hd});
    Var ao = linear(tape, att, eff(li, Family::O), bind(layer.o.b));
    if (drop > 0.0f) ao = dropout(tape, ao, drop, *opts.dropout_rng);
    x = layer_norm(tape, add(tape, x, ao), bind(layer.ln1_g), bind(layer.ln1_b), kLnEps);

    Var h = linear(tape, x, eff(li, Family::Ffn1), bind(layer.ffn1.b));
    h = model.cfg.activation == Activation::Gelu ? gelu(tape, h) : relu(tape, h);
    Var f = linear(tape, h, eff(li, Family::Ffn2), bind(layer.ffn2.b));
    if (drop > 0.0f) f = dropout(tape, f, drop, *opts.dropout_rng);
    x = layer_norm(tape, add(tape, x, f), bind(layer.ln2_g), bind(layer.ln2_b), kLnEps);
  }

  Var pooled = embedding(tape, x, first_token_rows(B, L));
  return linear(tape, pooled, bind(model.cls.w), bind(model.cls.b));
}

}  // namespace blockprune
