#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "blockprune/compact.hpp"
#include "blockprune/trainer.hpp"
#include "testutil.hpp"

using namespace blockprune;

namespace {

ModelConfig cfg_8h() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.d_ff = 32;
  cfg.n_layers = 2;
  cfg.vocab_size = 48;
  cfg.max_len = 12;
  cfg.n_classes = 2;
  cfg.dropout = 0.0f;
  return cfg;
}

MaskSet all_ones_masks(const Model& m) {
  MaskSet masks = MaskSet::sized(m.cfg.n_layers);
  for (std::int64_t li = 0; li < m.cfg.n_layers; ++li)
    for (Family f : kFamilies)
      masks.at(li, f) = Tensor<float>::full(m.layers[static_cast<std::size_t>(li)].lin(f).w.shape(), 1.0f);
  return masks;
}

// zero out head h of layer li in all four slabs
void mask_out_head(MaskSet& masks, const Model& m, std::int64_t li, std::int64_t h) {
  const std::int64_t dh = m.layers[static_cast<std::size_t>(li)].head_dim;
  for (Family f : {Family::Q, Family::K, Family::V}) {
    Tensor<float>& mk = masks.at(li, f);
    for (std::int64_t r = h * dh; r < (h + 1) * dh; ++r)
      for (std::int64_t c = 0; c < mk.extent(1); ++c) mk(r, c) = 0.0f;
  }
  Tensor<float>& mo = masks.at(li, Family::O);
  for (std::int64_t r = 0; r < mo.extent(0); ++r)
    for (std::int64_t c = h * dh; c < (h + 1) * dh; ++c) mo(r, c) = 0.0f;
}

void mask_out_dim(MaskSet& masks, std::int64_t li, std::int64_t j) {
  Tensor<float>& m1 = masks.at(li, Family::Ffn1);
  for (std::int64_t c = 0; c < m1.extent(1); ++c) m1(j, c) = 0.0f;
  Tensor<float>& m2 = masks.at(li, Family::Ffn2);
  for (std::int64_t r = 0; r < m2.extent(0); ++r) m2(r, j) = 0.0f;
}

Tensor<std::int32_t> random_ids(Rng& rng, std::int64_t b, std::int64_t l, std::int64_t vocab) {
  Tensor<std::int32_t> ids({b, l});
  for (std::int64_t i = 0; i < ids.numel(); ++i)
    ids[i] = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
  return ids;
}

}  // namespace

TEST_CASE("plan keeps everything on dense masks") {
  Rng rng(1);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  CompactPlan plan = plan_compaction(m, masks);
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    CHECK(plan.layers[li].kept_dims.size() == 32);
    CHECK(plan.layers[li].kept_heads.size() == 4);
  }
}

TEST_CASE("plan drops exactly the masked head and dims") {
  Rng rng(2);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  mask_out_head(masks, m, 0, 2);
  mask_out_dim(masks, 1, 1);
  mask_out_dim(masks, 1, 5);
  mask_out_dim(masks, 1, 6);
  CompactPlan plan = plan_compaction(m, masks);
  CHECK(plan.layers[0].kept_heads == std::vector<std::int64_t>{0, 1, 3});
  CHECK(plan.layers[0].kept_dims.size() == 32);
  CHECK(plan.layers[1].kept_heads.size() == 4);
  std::vector<std::int64_t> expect;
  for (std::int64_t j = 0; j < 32; ++j)
    if (j != 1 && j != 5 && j != 6) expect.push_back(j);
  CHECK(plan.layers[1].kept_dims == expect);
}

TEST_CASE("kept dims example: d_ff 8 with dims 1,5,6 masked") {
  ModelConfig cfg = cfg_8h();
  cfg.d_ff = 16;
  Rng rng(3);
  Model m = Model::init(cfg, rng);
  MaskSet masks = all_ones_masks(m);
  for (std::int64_t j : {1, 5, 6}) mask_out_dim(masks, 0, j);
  // shrink view: only the first 8 dims of interest; mask out the rest too
  for (std::int64_t j = 8; j < 16; ++j) mask_out_dim(masks, 0, j);
  CompactPlan plan = plan_compaction(m, masks);
  CHECK(plan.layers[0].kept_dims == std::vector<std::int64_t>{0, 2, 3, 4, 7});
}

TEST_CASE("identity plan reproduces the masked model exactly") {
  Rng rng(4);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  CompactPlan plan = plan_compaction(m, masks);
  Model c = compact(m, masks, plan);
  Rng drng(5);
  Tensor<std::int32_t> ids = random_ids(drng, 4, 12, m.cfg.vocab_size);
  CHECK(bptest::bitwise_equal(forward_logits(m, ids, &masks), forward_logits(c, ids)));
  Rng vr(6);
  CHECK(verify_equivalence(m, masks, c, 3, 8, 12, vr) <= 1e-6);
}

TEST_CASE("dropping masked dims halves W1 and the census matches the plan") {
  Rng rng(7);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  for (std::int64_t j = 0; j < 16; ++j) mask_out_dim(masks, 0, j);
  CompactPlan plan = plan_compaction(m, masks);
  Model c = compact(m, masks, plan);
  CHECK(c.layers[0].ffn1.w.extent(0) == 16);
  CHECK(c.layers[0].ffn1.b.numel() == 16);
  CHECK(c.layers[0].ffn2.w.extent(1) == 16);

  // census equals the closed-form count implied by the plan
  std::int64_t expect = 0;
  for (std::size_t li = 0; li < c.layers.size(); ++li) {
    const std::int64_t kh = static_cast<std::int64_t>(plan.layers[li].kept_heads.size());
    const std::int64_t kd = static_cast<std::int64_t>(plan.layers[li].kept_dims.size());
    const std::int64_t d = 16, dh = 4;
    expect += 3 * (kh * dh * d) + d * (kh * dh) + kd * d + d * kd;
  }
  CHECK(linear_param_census(c).total == expect);

  // forward equivalence after FFN-only cropping
  Rng vr(8);
  CHECK(verify_equivalence(m, masks, c, 3, 8, 12, vr) <= 1e-5);
}

TEST_CASE("dropping a fully masked head preserves the forward pass") {
  Rng rng(9);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  mask_out_head(masks, m, 0, 1);
  mask_out_head(masks, m, 1, 3);
  CompactPlan plan = plan_compaction(m, masks);
  CHECK(plan.layers[0].kept_heads.size() == 3);
  Model c = compact(m, masks, plan);
  CHECK(c.layers[0].n_heads == 3);
  CHECK(c.layers[0].q.w.extent(0) == 12);
  CHECK(c.layers[1].o.w.extent(1) == 12);
  Rng vr(10);
  CHECK(verify_equivalence(m, masks, c, 4, 8, 12, vr) <= 1e-4);
}

TEST_CASE("removing a non-empty head fails verification") {
  Rng rng(11);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  CompactPlan plan = plan_compaction(m, masks);
  plan.layers[0].kept_heads = {0, 1, 2};  // head 3 carries live weights
  Model c = compact(m, masks, plan);
  Rng vr(12);
  CHECK_THROWS_AS((void)verify_equivalence(m, masks, c, 3, 8, 12, vr), EquivalenceError);
}

TEST_CASE("zero output slice alone makes head removal safe") {
  // the structural reason removal works: if W_o's input slice for a head is
  // zero, the head cannot influence the output
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    Model m = Model::init(cfg_8h(), rng);
    const std::int64_t h = static_cast<std::int64_t>(rng.uniform_int(4));
    const std::int64_t dh = m.layers[0].head_dim;
    for (std::int64_t r = 0; r < 16; ++r)
      for (std::int64_t c = h * dh; c < (h + 1) * dh; ++c) m.layers[0].o.w(r, c) = 0.0f;
    MaskSet masks = all_ones_masks(m);
    CompactPlan plan = plan_compaction(m, masks);
    // strict criterion keeps the head (q/k/v still live); drop it manually
    plan.layers[0].kept_heads.clear();
    for (std::int64_t hh = 0; hh < 4; ++hh)
      if (hh != h) plan.layers[0].kept_heads.push_back(hh);
    Model c = compact(m, masks, plan);
    Rng vr(200 + seed);
    CHECK(verify_equivalence(m, masks, c, 2, 8, 12, vr) <= 1e-5);
  }
}

TEST_CASE("compaction is idempotent") {
  Rng rng(13);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  mask_out_head(masks, m, 0, 0);
  for (std::int64_t j = 0; j < 8; ++j) mask_out_dim(masks, 1, j);
  CompactPlan plan = plan_compaction(m, masks);
  Model c1 = compact(m, masks, plan);

  MaskSet none;
  CompactPlan plan2 = plan_compaction(c1, none);
  Model c2 = compact(c1, none, plan2);
  auto p1 = c1.params();
  auto p2 = c2.params();
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(bptest::bitwise_equal(*p1[i].tensor, *p2[i].tensor));
}

TEST_CASE("plan guard keeps one dim and one head in an emptied layer") {
  Rng rng(14);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  for (std::int64_t h = 0; h < 4; ++h) mask_out_head(masks, m, 0, h);
  for (std::int64_t j = 0; j < 32; ++j) mask_out_dim(masks, 0, j);
  CompactPlan plan = plan_compaction(m, masks);
  CHECK(plan.layers[0].kept_heads.size() == 1);
  CHECK(plan.layers[0].kept_dims.size() == 1);
  Model c = compact(m, masks, plan);
  CHECK(c.layers[0].n_heads == 1);
  Rng vr(15);
  // the kept head/dim are fully masked, so equivalence still holds
  CHECK(verify_equivalence(m, masks, c, 3, 8, 12, vr) <= 1e-5);
}

TEST_CASE("fill touches exactly kept-region positions whose mask is off") {
  Rng rng(16);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  mask_out_head(masks, m, 0, 2);      // dropped: must not be filled
  mask_out_dim(masks, 0, 3);          // dropped dim
  // scatter some block-style zeros inside kept regions
  Rng mr(17);
  for (std::int64_t li = 0; li < 2; ++li)
    for (Family f : kFamilies) {
      Tensor<float>& mk = masks.at(li, f);
      for (std::int64_t i = 0; i < mk.numel(); ++i)
        if (mr.uniform() < 0.2) mk[i] = 0.0f;
    }
  CompactPlan plan = plan_compaction(m, masks);
  MaskSet touched;
  Rng fill_rng(18);
  Model filled = compact_filled(m, masks, plan, fill_rng, &touched);
  (void)filled;

  for (std::int64_t li = 0; li < 2; ++li) {
    const std::int64_t dh = m.layers[static_cast<std::size_t>(li)].head_dim;
    auto head_kept = [&](std::int64_t h) {
      const auto& kh = plan.layers[static_cast<std::size_t>(li)].kept_heads;
      return std::find(kh.begin(), kh.end(), h) != kh.end();
    };
    auto dim_kept = [&](std::int64_t j) {
      const auto& kd = plan.layers[static_cast<std::size_t>(li)].kept_dims;
      return std::find(kd.begin(), kd.end(), j) != kd.end();
    };
    for (Family f : kFamilies) {
      const Tensor<float>& mk = *masks.find(li, f);
      const Tensor<float>* tc = touched.find(li, f);
      for (std::int64_t i = 0; i < mk.extent(0); ++i)
        for (std::int64_t j = 0; j < mk.extent(1); ++j) {
          bool in_kept = false;
          switch (f) {
            case Family::Q:
            case Family::K:
            case Family::V: in_kept = head_kept(i / dh); break;
            case Family::O: in_kept = head_kept(j / dh); break;
            case Family::Ffn1: in_kept = dim_kept(i); break;
            case Family::Ffn2: in_kept = dim_kept(j); break;
          }
          const bool expect = in_kept && mk(i, j) == 0.0f;
          const bool got = tc && !tc->empty() && (*tc)(i, j) != 0.0f;
          CHECK(got == expect);
        }
    }
  }
}

TEST_CASE("fill with dense masks reduces to plain compaction") {
  Rng rng(19);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  CompactPlan plan = plan_compaction(m, masks);
  Rng fr(20);
  Model filled = compact_filled(m, masks, plan, fr);
  Model plain = compact(m, masks, plan);
  auto pa = filled.params();
  auto pb = plain.params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bptest::bitwise_equal(*pa[i].tensor, *pb[i].tensor));
}

TEST_CASE("fill never modifies biases") {
  Rng rng(21);
  Model m = Model::init(cfg_8h(), rng);
  for (auto& layer : m.layers)
    for (Family f : kFamilies)
      layer.lin(f).b = Tensor<float>::uniform(layer.lin(f).b.shape(), rng, -1.f, 1.f);
  MaskSet masks = all_ones_masks(m);
  Rng mr(22);
  for (Family f : kFamilies) {
    Tensor<float>& mk = masks.at(0, f);
    for (std::int64_t i = 0; i < mk.numel(); ++i)
      if (mr.uniform() < 0.3) mk[i] = 0.0f;
  }
  CompactPlan plan = plan_compaction(m, masks);
  Rng fr(23);
  Model filled = compact_filled(m, masks, plan, fr);
  Model plain = compact(m, masks, plan);
  for (std::size_t li = 0; li < m.layers.size(); ++li)
    for (Family f : kFamilies)
      CHECK(bptest::bitwise_equal(filled.layers[li].lin(f).b, plain.layers[li].lin(f).b));
}

TEST_CASE("rewind protection marks surviving heads and clamps their masks") {
  Rng rng(24);
  Model m = Model::init(cfg_8h(), rng);
  MaskSet masks = all_ones_masks(m);
  mask_out_head(masks, m, 0, 1);
  mask_out_head(masks, m, 0, 2);
  CompactPlan plan = plan_compaction(m, masks);
  ProtectionMask prot = rewind_protection(plan, m);
  CHECK(prot.kept_heads[0] == std::vector<bool>{true, false, false, true});
  CHECK(prot.kept_heads[1] == std::vector<bool>{true, true, true, true});

  // a protected group's mask survives even under crushing regularization
  PruneState prune = attach_method(m, Method::Struct);
  apply_protection(prune, prot, m);
  const ScoreGroup* g0 = prune.group_for(0, Family::Q);
  REQUIRE(g0 != nullptr);
  CHECK(g0->protected_entries == std::vector<std::uint8_t>{1, 0, 0, 1});

  // square-pattern protection marks blocks overlapping protected slabs
  PruneState sq = attach_method(m, Method::Hybrid, 4);
  apply_protection(sq, prot, m);
  int member = -1;
  const ScoreGroup* gq = sq.group_for(0, Family::Q, &member);
  REQUIRE(gq != nullptr);
  const MaskGeometry geom = gq->members[static_cast<std::size_t>(member)].geom;
  const std::int64_t grid_cols = geom.grid_cols(16);
  for (std::int64_t gi = 0; gi < geom.grid_rows(16); ++gi)
    for (std::int64_t gj = 0; gj < grid_cols; ++gj) {
      const std::int64_t head_of_block = (gi * geom.block_rows) / m.layers[0].head_dim;
      const bool expect = head_of_block == 0 || head_of_block == 3;
      CHECK((gq->protected_entries[static_cast<std::size_t>(gi * grid_cols + gj)] != 0) == expect);
    }
}
