#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "blockprune/pruning.hpp"
#include "blockprune/rng.hpp"
#include "blockprune/tape.hpp"
#include "blockprune/tensor.hpp"

namespace blockprune {

enum class Activation { Gelu, Relu };

struct ModelConfig {
  std::int64_t d_model = 128;
  std::int64_t n_heads = 4;
  std::int64_t d_ff = 512;
  std::int64_t n_layers = 4;
  std::int64_t vocab_size = 259;
  std::int64_t max_len = 64;
  std::int64_t n_classes = 2;
  Activation activation = Activation::Gelu;
  float dropout = 0.1f;

  void validate() const;
  std::int64_t head_dim() const { return d_model / n_heads; }

  // Doubled-width variant used as the large teacher.
  ModelConfig large() const {
    ModelConfig c = *this;
    c.d_model *= 2;
    c.d_ff *= 2;
    return c;
  }
};

// The six prunable matrix families.
enum class Family : int { Q = 0, K = 1, V = 2, O = 3, Ffn1 = 4, Ffn2 = 5 };
constexpr std::array<Family, 6> kFamilies = {Family::Q, Family::K, Family::V,
                                             Family::O, Family::Ffn1, Family::Ffn2};
const char* family_name(Family f);
inline bool is_attention(Family f) { return f != Family::Ffn1 && f != Family::Ffn2; }

// Weight stored [out, in]; the bias is never masked.
struct PrunableLinear {
  Tensor<float> w;
  Tensor<float> b;
};

struct EncoderLayer {
  PrunableLinear q, k, v, o, ffn1, ffn2;
  Tensor<float> ln1_g, ln1_b, ln2_g, ln2_b;
  std::int64_t n_heads = 0;  // per layer; shrinks under compaction
  std::int64_t head_dim = 0;

  PrunableLinear& lin(Family f);
  const PrunableLinear& lin(Family f) const;
  std::int64_t d_ff() const { return ffn1.w.extent(0); }
};

struct Model {
  ModelConfig cfg;
  Tensor<float> tok_emb;  // [vocab, d_model]
  Tensor<float> pos_emb;  // [max_len, d_model]
  Tensor<float> ln_emb_g, ln_emb_b;
  std::vector<EncoderLayer> layers;
  PrunableLinear cls;  // first-token pooling -> class logits

  static Model init(const ModelConfig& cfg, Rng& rng);

  // Every trainable tensor in a fixed order. `decay` marks tensors subject
  // to weight decay (weight matrices only).
  struct ParamRef {
    std::string name;
    Tensor<float>* tensor;
    bool decay;
  };
  std::vector<ParamRef> params();
};

// Optional effective-weight masks, one slot per (layer, family).
struct MaskSet {
  std::vector<std::array<Tensor<float>, 6>> slots;

  static MaskSet sized(std::int64_t n_layers) {
    MaskSet m;
    m.slots.resize(static_cast<std::size_t>(n_layers));
    return m;
  }
  bool empty() const { return slots.empty(); }
  Tensor<float>& at(std::int64_t layer, Family f) {
    return slots[static_cast<std::size_t>(layer)][static_cast<std::size_t>(static_cast<int>(f))];
  }
  const Tensor<float>* find(std::int64_t layer, Family f) const {
    if (slots.empty()) return nullptr;
    const Tensor<float>& t = slots[static_cast<std::size_t>(layer)][static_cast<std::size_t>(static_cast<int>(f))];
    return t.empty() ? nullptr : &t;
  }
};

// Lean inference path (no tape, no dropout). When masks are given, each
// prunable weight is multiplied by its mask before use.
Tensor<float> forward_logits(const Model& model, const Tensor<std::int32_t>& ids, const MaskSet* masks = nullptr);

// ---------------------------------------------------------------------------
// Pruning attachment.
// ---------------------------------------------------------------------------

enum class Method { None, Block, Hybrid, HybridNT, Struct, HybridFilled, HybridFilledLT };
Method parse_method(const std::string& name);
const char* method_name(Method m);
bool method_uses_teacher(Method m);
bool method_uses_fill(Method m);

// One trainable score grid shared by one or more matrices.
struct ScoreGroup {
  Tensor<float> scores;
  struct Member {
    std::int64_t layer;
    Family family;
    MaskGeometry geom;
  };
  std::vector<Member> members;
  bool attention = false;  // selects lambda_att vs lambda_ffn
  // rewinding: per-entry flags clamped above the threshold (empty = none)
  std::vector<std::uint8_t> protected_entries;
};

struct PruneState {
  Method method = Method::None;
  BlockPattern att_pattern, ffn_pattern;
  float tau = 0.0f;
  float s0 = 0.01f;
  RegWeights reg;  // per-family factors for lambda_base = 1
  std::vector<ScoreGroup> groups;
  // member lookup: (layer, family) -> (group, member) or -1
  std::vector<std::array<std::pair<int, int>, 6>> lookup;

  bool frozen = false;
  MaskSet frozen_masks;

  const ScoreGroup* group_for(std::int64_t layer, Family f, int* member = nullptr) const;
  MaskSet masks(const Model& model) const;  // frozen masks when frozen
  void freeze(const Model& model);
};

// Assign block patterns per family for a named method. Scores start at s0,
// so every weight is kept at step 0.
PruneState attach_method(const Model& model, Method method, std::int64_t block_size = 32,
                         bool tied_heads = true);
PruneState attach_patterns(const Model& model, const BlockPattern& att, const BlockPattern& ffn);

// ---------------------------------------------------------------------------
// Reporting.
// ---------------------------------------------------------------------------

struct Census {
  std::int64_t total = 0;
  std::int64_t nonzero = 0;
  std::array<std::int64_t, 6> family_total{};
  std::array<std::int64_t, 6> family_nonzero{};
};

// Weight parameters of the six prunable families only; nonzero counts use
// effective (masked) weights.
Census linear_param_census(const Model& model, const MaskSet* masks = nullptr);

struct DensityReport {
  double density = 1.0;
  std::array<double, 6> family_density{};
  std::int64_t total_heads = 0;
  std::int64_t nonempty_heads = 0;
  double head_compression = 1.0;
};

DensityReport density_report(const Model& model, const MaskSet* masks = nullptr);

// ---------------------------------------------------------------------------
// Tape forward for training.
// ---------------------------------------------------------------------------

// Binds parameter tensors to tape leaves on demand (one leaf per tensor).
class TapeBinder {
 public:
  explicit TapeBinder(Tape<float>& tape) : tape_(&tape) {}
  Var operator()(const Tensor<float>& t);

 private:
  Tape<float>* tape_;
  std::vector<std::pair<const void*, Var>> bound_;
};

struct ForwardOptions {
  bool train = false;            // enables dropout
  bool apply_masks = false;      // run prunable weights through score masks
  Rng* dropout_rng = nullptr;    // required when train and dropout > 0
};

Var model_forward_tape(Tape<float>& tape, TapeBinder& bind, const Model& model, const PruneState* prune,
                       const Tensor<std::int32_t>& ids, const ForwardOptions& opts);

}  // namespace blockprune
