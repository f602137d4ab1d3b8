#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>

#include "blockprune/ops.hpp"
#include "blockprune/tape.hpp"
#include "blockprune/tensor.hpp"

namespace blockprune {

// Per-matrix block geometry. Every masking structure reduces to a fixed
// (block_rows, block_cols) grid: unstructured is 1x1, square blocks are sxs,
// an FFN dimension is a full row (1,N) of W1 or a full column (M,1) of W2,
// and a head slab is (head_dim, N) on q/k/v or (M, head_dim) on the output
// projection. Score entry g covers block (g / grid_cols, g % grid_cols).
struct MaskGeometry {
  std::int64_t block_rows = 1;
  std::int64_t block_cols = 1;

  static MaskGeometry unstructured() { return {1, 1}; }
  static MaskGeometry square(std::int64_t s) { return {s, s}; }
  static MaskGeometry full_rows(std::int64_t rows_per_group, std::int64_t n_cols) {
    return {rows_per_group, n_cols};
  }
  static MaskGeometry full_cols(std::int64_t n_rows, std::int64_t cols_per_group) {
    return {n_rows, cols_per_group};
  }

  void validate(std::int64_t m, std::int64_t n) const {
    if (block_rows < 1 || block_cols < 1) throw ContractError("block extents must be >= 1");
    if (m % block_rows != 0 || n % block_cols != 0)
      throw ContractError("matrix " + std::to_string(m) + "x" + std::to_string(n) +
                          " not divisible by block " + std::to_string(block_rows) + "x" +
                          std::to_string(block_cols));
  }

  std::int64_t grid_rows(std::int64_t m) const { return m / block_rows; }
  std::int64_t grid_cols(std::int64_t n) const { return n / block_cols; }
  std::int64_t groups(std::int64_t m, std::int64_t n) const { return grid_rows(m) * grid_cols(n); }

  std::int64_t group_of(std::int64_t i, std::int64_t j, std::int64_t n) const {
    return (i / block_rows) * grid_cols(n) + (j / block_cols);
  }
};

// Binary mask from thresholded scores, expanded block-wise onto [m, n].
// Strict threshold: a score exactly at tau masks its block off.
template <typename S>
Tensor<S> expand_mask(const Tensor<S>& scores, S tau, const MaskGeometry& geom, std::int64_t m,
                      std::int64_t n) {
  geom.validate(m, n);
  if (scores.numel() != geom.groups(m, n))
    throw ShapeError("expand_mask: score count " + std::to_string(scores.numel()) + " != group count " +
                     std::to_string(geom.groups(m, n)));
  Tensor<S> mask({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      mask(i, j) = scores[geom.group_of(i, j, n)] > tau ? S{1} : S{0};
  return mask;
}

template <typename S>
Tensor<S> masked_weight(const Tensor<S>& w, const Tensor<S>& mask) {
  return k_mul(w, mask);
}

// Straight-through task gradient for the score grid: each entry is the sum
// of upstream (*) W over its block. Grids tied across several matrices
// accumulate by summing the per-matrix results.
template <typename S>
Tensor<S> score_task_grad(const Tensor<S>& upstream, const Tensor<S>& w, const MaskGeometry& geom) {
  require_same_shape(upstream, w, "score_task_grad");
  if (w.ndim() != 2) throw ShapeError("score_task_grad: expected a matrix");
  const std::int64_t m = w.extent(0), n = w.extent(1);
  geom.validate(m, n);
  Tensor<S> g({geom.grid_rows(m), geom.grid_cols(n)});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) g[geom.group_of(i, j, n)] += upstream(i, j) * w(i, j);
  return g;
}

// Tape op: W' = W (*) 1(S > tau) with the threshold treated as identity in
// backward. grad_W = upstream (*) mask; grad_S = block sums of upstream (*) W.
template <typename S>
Var masked_st(Tape<S>& t, Var w, Var scores, const MaskGeometry& geom, S tau) {
  const Tensor<S>& wv = t.value(w);
  auto mask = std::make_shared<Tensor<S>>(expand_mask(t.value(scores), tau, geom, wv.extent(0), wv.extent(1)));
  Tensor<S> out = k_mul(wv, *mask);
  return t.emit(std::move(out), {w.id, scores.id}, [w, scores, geom, mask](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    tp.add_grad(w, k_mul(g, *mask));
    Tensor<S> gs = score_task_grad(g, tp.value(w), geom);
    tp.add_grad(scores, gs.reshaped(tp.value(scores).shape()));
  });
}

// ---------------------------------------------------------------------------
// Pattern configuration per matrix family, and the split regularizer.
// ---------------------------------------------------------------------------

enum class PatternKind { Unstructured, Square, DimPairedFFN, HeadBlocks };

struct BlockPattern {
  PatternKind kind = PatternKind::Square;
  std::int64_t block_size = 32;  // Square only
  bool tied_heads = true;        // HeadBlocks: one score shared by q/k/v/o

  // Weight parameters covered by one score group, counted the way the
  // regularizer balance does: a square block counts its own area, an FFN
  // dimension counts its paired row+column, a head counts one projection's
  // slab.
  std::int64_t group_params(std::int64_t d_model, std::int64_t n_heads) const {
    switch (kind) {
      case PatternKind::Unstructured: return 1;
      case PatternKind::Square: return block_size * block_size;
      case PatternKind::DimPairedFFN: return 2 * d_model;
      case PatternKind::HeadBlocks: return (d_model / n_heads) * d_model;
    }
    throw ContractError("unknown pattern kind");
  }
};

struct RegWeights {
  double lambda_att = 0.0;
  double lambda_ffn = 0.0;
};

// Equalize per-parameter regularization pressure: the family with the
// smallest score group keeps lambda_base, larger groups are scaled down by
// the group-size ratio.
inline RegWeights balance_lambdas(double lambda_base, const BlockPattern& att, const BlockPattern& ffn,
                                  std::int64_t d_model, std::int64_t n_heads) {
  const double g_att = static_cast<double>(att.group_params(d_model, n_heads));
  const double g_ffn = static_cast<double>(ffn.group_params(d_model, n_heads));
  const double g_min = std::min(g_att, g_ffn);
  return RegWeights{lambda_base * g_min / g_att, lambda_base * g_min / g_ffn};
}

// lambda * sum sigma(S).
template <typename S>
double reg_value(const Tensor<S>& scores, double lambda) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < scores.numel(); ++i)
    acc += static_cast<double>(detail::sigmoid_scalar(static_cast<double>(scores[i])));
  return lambda * acc;
}

// d/dS of reg_value: lambda * sigma'(S).
template <typename S>
Tensor<S> reg_grad(const Tensor<S>& scores, double lambda) {
  Tensor<S> g(scores.shape());
  for (std::int64_t i = 0; i < scores.numel(); ++i) {
    const double s = detail::sigmoid_scalar(static_cast<double>(scores[i]));
    g[i] = static_cast<S>(lambda * s * (1.0 - s));
  }
  return g;
}

}  // namespace blockprune
