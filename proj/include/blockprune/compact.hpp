#pragma once

#include <cstdint>
#include <vector>

#include "blockprune/model.hpp"

namespace blockprune {

// Per layer: surviving FFN inner dimensions and attention heads, sorted.
struct CompactPlan {
  struct Layer {
    std::vector<std::int64_t> kept_dims;
    std::vector<std::int64_t> kept_heads;
  };
  std::vector<Layer> layers;
};

// Heads protected from pruning in a follow-up run, one flag per head.
struct ProtectionMask {
  std::vector<std::vector<bool>> kept_heads;
};

// Decide what survives compaction. An FFN dimension is dropped only when its
// effective W1 row and W2 column are both entirely zero; a head is dropped
// only when all four of its slabs are entirely zero. Should a layer lose
// everything, the highest-scoring dim/head is kept so the layer stays
// well-formed.
CompactPlan plan_compaction(const Model& model, const MaskSet& masks, const PruneState* prune = nullptr);

// Crop effective weights down to the plan: kept FFN rows/columns, kept head
// slabs concatenated in order; biases of removed dims/heads deleted. Scores
// do not carry over.
Model compact(const Model& model, const MaskSet& masks, const CompactPlan& plan);

// Max |logit| deviation between the masked model and its compacted form over
// random batches. Throws EquivalenceError above `bound`.
double verify_equivalence(const Model& masked_model, const MaskSet& masks, const Model& compact_model,
                          int n_batches, std::int64_t batch, std::int64_t seq_len, Rng& rng,
                          double bound = 1e-4);

// Re-draw masked-off entries inside kept heads/dims from
// U(-1/sqrt(fan_in), +1/sqrt(fan_in)), then crop. `touched` (optional)
// receives 0/1 maps of the re-drawn positions in original coordinates.
Model compact_filled(const Model& model, const MaskSet& masks, const CompactPlan& plan, Rng& rng,
                     MaskSet* touched = nullptr);

// Protection flags for heads that survived a first run.
ProtectionMask rewind_protection(const CompactPlan& plan, const Model& model);

// Clamp score groups of protected heads above the threshold: head-block
// entries directly, square/unstructured entries for every block overlapping
// a protected slab.
void apply_protection(PruneState& prune, const ProtectionMask& protection, const Model& model);

}  // namespace blockprune
