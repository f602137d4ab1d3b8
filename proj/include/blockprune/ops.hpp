#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "blockprune/rng.hpp"
#include "blockprune/tape.hpp"
#include "blockprune/tensor.hpp"

namespace blockprune {

template <typename S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<const EigenMat<S>> mat_view(const Tensor<S>& t, std::int64_t rows, std::int64_t cols) {
  return Eigen::Map<const EigenMat<S>>(t.data(), rows, cols);
}

template <typename S>
Eigen::Map<EigenMat<S>> mat_view(Tensor<S>& t, std::int64_t rows, std::int64_t cols) {
  return Eigen::Map<EigenMat<S>>(t.data(), rows, cols);
}

// Strided view of a [rows, cols] slice starting at `ptr` whose rows are
// `outer` elements apart (used for per-head slices of folded projections).
template <typename S>
using StridedView = Eigen::Map<const EigenMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using StridedViewMut = Eigen::Map<EigenMat<S>, 0, Eigen::OuterStride<>>;

// ---------------------------------------------------------------------------
// Forward kernels. Pure tensor -> tensor math shared by the training tape and
// the lean inference path, so both produce bit-identical values.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> k_matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul: expected 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.extent(1) != b.extent(0))
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<S> c({a.extent(0), b.extent(1)});
  mat_view(c, a.extent(0), b.extent(1)).noalias() =
      mat_view(a, a.extent(0), a.extent(1)) * mat_view(b, b.extent(0), b.extent(1));
  check_finite(c, "matmul");
  return c;
}

template <typename S>
Tensor<S> k_add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "add");
  Tensor<S> c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] + b[i];
  check_finite(c, "add");
  return c;
}

template <typename S>
Tensor<S> k_mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "mul");
  Tensor<S> c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] * b[i];
  check_finite(c, "mul");
  return c;
}

template <typename S>
Tensor<S> k_scale(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
  check_finite(out, "scale");
  return out;
}

// Broadcast a vector over the trailing axis: out[.., j] = a[.., j] + v[j].
template <typename S>
Tensor<S> k_add_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
  if (v.ndim() != 1 || a.last_extent() != v.extent(0))
    throw ShapeError("add_rowvec: trailing extent " + shape_str(a.shape()) + " vs vector " + shape_str(v.shape()));
  Tensor<S> c(a.shape());
  const std::int64_t d = v.extent(0), rows = a.numel() / d;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j) c[r * d + j] = a[r * d + j] + v[j];
  check_finite(c, "add_rowvec");
  return c;
}

template <typename S>
Tensor<S> k_relu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > S{0} ? x[i] : S{0};
  return y;
}

namespace detail {
template <typename S>
inline S gelu_scalar(S x) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S a = static_cast<S>(0.044715);
  return static_cast<S>(0.5) * x * (S{1} + std::tanh(c * (x + a * x * x * x)));
}

template <typename S>
inline S gelu_grad_scalar(S x) {
  const S c = static_cast<S>(0.7978845608028654);
  const S a = static_cast<S>(0.044715);
  const S u = c * (x + a * x * x * x);
  const S t = std::tanh(u);
  const S sech2 = S{1} - t * t;
  return static_cast<S>(0.5) * (S{1} + t) + static_cast<S>(0.5) * x * sech2 * c * (S{1} + S{3} * a * x * x);
}

template <typename S>
inline S sigmoid_scalar(S x) {
  return x >= S{0} ? S{1} / (S{1} + std::exp(-x)) : std::exp(x) / (S{1} + std::exp(x));
}
}  // namespace detail

template <typename S>
Tensor<S> k_gelu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = detail::gelu_scalar(x[i]);
  check_finite(y, "gelu");
  return y;
}

template <typename S>
Tensor<S> k_sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = detail::sigmoid_scalar(x[i]);
  check_finite(y, "sigmoid");
  return y;
}

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError("axis out of range");
  return axis;
}

// Max-subtracted softmax along `axis`. Reductions run in fixed index order.
template <typename S>
Tensor<S> k_softmax(const Tensor<S>& x, std::int64_t axis) {
  axis = normalize_axis(axis, x.ndim());
  std::int64_t outer = 1, inner = 1;
  const std::int64_t n = x.extent(axis);
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.extent(i);
  for (std::int64_t i = axis + 1; i < x.ndim(); ++i) inner *= x.extent(i);
  Tensor<S> y(x.shape());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      S m = x[base];
      for (std::int64_t i = 1; i < n; ++i) m = std::max(m, x[base + i * inner]);
      S sum{0};
      for (std::int64_t i = 0; i < n; ++i) {
        const S e = std::exp(x[base + i * inner] - m);
        y[base + i * inner] = e;
        sum += e;
      }
      const S inv = S{1} / sum;
      for (std::int64_t i = 0; i < n; ++i) y[base + i * inner] *= inv;
    }
  }
  check_finite(y, "softmax");
  return y;
}

template <typename S>
struct LayerNormSaved {
  Tensor<S> xhat;     // normalized input
  Tensor<S> inv_std;  // one per row
};

template <typename S>
Tensor<S> k_layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps,
                       LayerNormSaved<S>* saved = nullptr) {
  if (eps <= S{0}) throw ContractError("layer_norm: eps must be positive");
  const std::int64_t d = x.last_extent();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias length must match trailing extent");
  const std::int64_t rows = x.numel() / d;
  Tensor<S> y(x.shape());
  Tensor<S> xhat(x.shape());
  Tensor<S> inv_std({rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * d;
    S mean{0};
    for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<S>(d);
    S var{0};
    for (std::int64_t j = 0; j < d; ++j) {
      const S c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S inv = S{1} / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::int64_t j = 0; j < d; ++j) {
      const S h = (xr[j] - mean) * inv;
      xhat[r * d + j] = h;
      y[r * d + j] = gain[j] * h + bias[j];
    }
  }
  if (saved) *saved = LayerNormSaved<S>{std::move(xhat), std::move(inv_std)};
  check_finite(y, "layer_norm");
  return y;
}

template <typename S>
Tensor<S> k_embedding(const Tensor<S>& table, const Tensor<std::int32_t>& ids) {
  if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-D");
  const std::int64_t vocab = table.extent(0), d = table.extent(1);
  Shape out_shape = ids.shape();
  out_shape.push_back(d);
  Tensor<S> out(out_shape);
  for (std::int64_t i = 0; i < ids.numel(); ++i) {
    const std::int32_t id = ids[i];
    if (id < 0 || id >= vocab) throw IndexError("embedding: id " + std::to_string(id) + " out of range");
    const S* row = table.data() + static_cast<std::int64_t>(id) * d;
    S* dst = out.data() + i * d;
    for (std::int64_t j = 0; j < d; ++j) dst[j] = row[j];
  }
  return out;
}

// Scaled dot-product attention over folded heads. q/k/v are [B, L, H*dh];
// the result matches concatenating per-head softmax(Q Kt / sqrt(dh)) V.
template <typename S>
Tensor<S> k_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, std::int64_t n_heads,
                      Tensor<S>* save_probs = nullptr) {
  if (q.ndim() != 3) throw ShapeError("attention: q/k/v must be [batch, len, heads*head_dim]");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::int64_t B = q.extent(0), L = q.extent(1), hd = q.extent(2);
  if (n_heads < 1 || hd % n_heads != 0) throw ShapeError("attention: head count must divide the folded extent");
  const std::int64_t dh = hd / n_heads;
  const S scale = S{1} / std::sqrt(static_cast<S>(dh));
  Tensor<S> out(q.shape());
  Tensor<S> probs({B, n_heads, L, L});
  Tensor<S> scores({L, L});
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t h = 0; h < n_heads; ++h) {
      const S* qp = q.data() + (b * L) * hd + h * dh;
      const S* kp = k.data() + (b * L) * hd + h * dh;
      const S* vp = v.data() + (b * L) * hd + h * dh;
      StridedView<S> Q(qp, L, dh, Eigen::OuterStride<>(hd));
      StridedView<S> K(kp, L, dh, Eigen::OuterStride<>(hd));
      StridedView<S> V(vp, L, dh, Eigen::OuterStride<>(hd));
      mat_view(scores, L, L).noalias() = (Q * K.transpose()) * scale;
      Tensor<S> p = k_softmax(scores, 1);
      S* pp = probs.data() + ((b * n_heads + h) * L) * L;
      for (std::int64_t i = 0; i < L * L; ++i) pp[i] = p[i];
      StridedViewMut<S> O(out.data() + (b * L) * hd + h * dh, L, dh, Eigen::OuterStride<>(hd));
      O.noalias() = mat_view(p, L, L) * V;
    }
  }
  if (save_probs) *save_probs = std::move(probs);
  check_finite(out, "attention");
  return out;
}

template <typename S>
Tensor<S> k_cross_entropy(const Tensor<S>& logits, const Tensor<std::int32_t>& labels,
                          Tensor<S>* save_probs = nullptr) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [batch, classes]");
  const std::int64_t B = logits.extent(0), C = logits.extent(1);
  if (labels.numel() != B) throw ShapeError("cross_entropy: one label per row required");
  Tensor<S> probs = k_softmax(logits, 1);
  S total{0};
  for (std::int64_t i = 0; i < B; ++i) {
    const std::int32_t y = labels[i];
    if (y < 0 || y >= C) throw IndexError("cross_entropy: label " + std::to_string(y) + " out of range");
    total -= std::log(probs(i, y));
  }
  if (save_probs) *save_probs = std::move(probs);
  Tensor<S> loss = Tensor<S>::scalar(total / static_cast<S>(B));
  check_finite(loss, "cross_entropy");
  return loss;
}

// Affine map with the weight stored [out, in]: y = x * W^T + b.
template <typename S>
Tensor<S> k_linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.ndim() != 2 || w.ndim() != 2) throw ShapeError("linear: expected 2-D input and weight");
  const std::int64_t r = x.extent(0), in = x.extent(1), out = w.extent(0);
  if (w.extent(1) != in)
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " does not accept input " + shape_str(x.shape()));
  if (b.numel() != out) throw ShapeError("linear: bias length must equal the output extent");
  Tensor<S> y({r, out});
  mat_view(y, r, out).noalias() = mat_view(x, r, in) * mat_view(w, out, in).transpose();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < out; ++j) y(i, j) += b[j];
  check_finite(y, "linear");
  return y;
}

// ---------------------------------------------------------------------------
// Tape ops.
// ---------------------------------------------------------------------------

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  Tensor<S> c = k_matmul(t.value(a), t.value(b));
  return t.emit(std::move(c), {a.id, b.id}, [a, b](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& av = tp.value(a);
    const Tensor<S>& bv = tp.value(b);
    const std::int64_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
    Tensor<S> ga({m, k});
    mat_view(ga, m, k).noalias() = mat_view(g, m, n) * mat_view(bv, k, n).transpose();
    tp.add_grad(a, ga);
    Tensor<S> gb({k, n});
    mat_view(gb, k, n).noalias() = mat_view(av, m, k).transpose() * mat_view(g, m, n);
    tp.add_grad(b, gb);
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  return t.emit(k_add(t.value(a), t.value(b)), {a.id, b.id}, [a, b](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    tp.add_grad(a, g);
    tp.add_grad(b, g);
  });
}

template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  return t.emit(k_mul(t.value(a), t.value(b)), {a.id, b.id}, [a, b](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    tp.add_grad(a, k_mul(g, tp.value(b)));
    tp.add_grad(b, k_mul(g, tp.value(a)));
  });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S c) {
  return t.emit(k_scale(t.value(a), c), {a.id}, [a, c](Tape<S>& tp, int self) {
    tp.add_grad(a, k_scale(*tp.grad(Var{self}), c));
  });
}

// out = ca*a + cb*b, elementwise on same-shape tensors.
template <typename S>
Var add_scaled(Tape<S>& t, Var a, S ca, Var b, S cb) {
  const Tensor<S>& av = t.value(a);
  const Tensor<S>& bv = t.value(b);
  require_same_shape(av, bv, "add_scaled");
  Tensor<S> c(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) c[i] = ca * av[i] + cb * bv[i];
  return t.emit(std::move(c), {a.id, b.id}, [a, ca, b, cb](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    tp.add_grad(a, k_scale(g, ca));
    tp.add_grad(b, k_scale(g, cb));
  });
}

// out = a + c with a constant offset; gradient passes through unchanged.
template <typename S>
Var add_const(Tape<S>& t, Var a, S c) {
  const Tensor<S>& av = t.value(a);
  Tensor<S> out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + c;
  return t.emit(std::move(out), {a.id},
                [a](Tape<S>& tp, int self) { tp.add_grad(a, *tp.grad(Var{self})); });
}

template <typename S>
Var add_rowvec(Tape<S>& t, Var a, Var v) {
  return t.emit(k_add_rowvec(t.value(a), t.value(v)), {a.id, v.id}, [a, v](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    tp.add_grad(a, g);
    const std::int64_t d = g.last_extent(), rows = g.numel() / d;
    Tensor<S> gv({d});
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
    tp.add_grad(v, gv);
  });
}

template <typename S>
Var relu(Tape<S>& t, Var x) {
  return t.emit(k_relu(t.value(x)), {x.id}, [x](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& xv = tp.value(x);
    Tensor<S> gx(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) gx[i] = xv[i] > S{0} ? g[i] : S{0};
    tp.add_grad(x, gx);
  });
}

template <typename S>
Var gelu(Tape<S>& t, Var x) {
  return t.emit(k_gelu(t.value(x)), {x.id}, [x](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& xv = tp.value(x);
    Tensor<S> gx(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) gx[i] = g[i] * detail::gelu_grad_scalar(xv[i]);
    tp.add_grad(x, gx);
  });
}

template <typename S>
Var sigmoid(Tape<S>& t, Var x) {
  return t.emit(k_sigmoid(t.value(x)), {x.id}, [x](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& y = tp.value(Var{self});
    Tensor<S> gx(y.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) gx[i] = g[i] * y[i] * (S{1} - y[i]);
    tp.add_grad(x, gx);
  });
}

template <typename S>
Var softmax(Tape<S>& t, Var x, std::int64_t axis) {
  const std::int64_t ax = normalize_axis(axis, t.value(x).ndim());
  return t.emit(k_softmax(t.value(x), ax), {x.id}, [x, ax](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& y = tp.value(Var{self});
    std::int64_t outer = 1, inner = 1;
    const std::int64_t n = y.extent(ax);
    for (std::int64_t i = 0; i < ax; ++i) outer *= y.extent(i);
    for (std::int64_t i = ax + 1; i < y.ndim(); ++i) inner *= y.extent(i);
    Tensor<S> gx(y.shape());
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * n * inner + in;
        S dot{0};
        for (std::int64_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
        for (std::int64_t i = 0; i < n; ++i)
          gx[base + i * inner] = y[base + i * inner] * (g[base + i * inner] - dot);
      }
    }
    tp.add_grad(x, gx);
  });
}

template <typename S>
Var layer_norm(Tape<S>& t, Var x, Var gain, Var bias, S eps) {
  auto saved = std::make_shared<LayerNormSaved<S>>();
  Tensor<S> y = k_layer_norm(t.value(x), t.value(gain), t.value(bias), eps, saved.get());
  return t.emit(std::move(y), {x.id, gain.id, bias.id}, [x, gain, bias, saved](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& xhat = saved->xhat;
    const std::int64_t d = xhat.last_extent(), rows = xhat.numel() / d;
    const Tensor<S>& gv = tp.value(gain);
    Tensor<S> dgain({d}), dbias({d}), dx(xhat.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* gr = g.data() + r * d;
      const S* hr = xhat.data() + r * d;
      S mean_dh{0}, mean_dh_h{0};
      for (std::int64_t j = 0; j < d; ++j) {
        dgain[j] += gr[j] * hr[j];
        dbias[j] += gr[j];
        const S dh = gr[j] * gv[j];
        mean_dh += dh;
        mean_dh_h += dh * hr[j];
      }
      mean_dh /= static_cast<S>(d);
      mean_dh_h /= static_cast<S>(d);
      const S inv = saved->inv_std[r];
      for (std::int64_t j = 0; j < d; ++j) {
        const S dh = gr[j] * gv[j];
        dx[r * d + j] = inv * (dh - mean_dh - hr[j] * mean_dh_h);
      }
    }
    tp.add_grad(x, dx);
    tp.add_grad(gain, dgain);
    tp.add_grad(bias, dbias);
  });
}

template <typename S>
Var embedding(Tape<S>& t, Var table, Tensor<std::int32_t> ids) {
  Tensor<S> out = k_embedding(t.value(table), ids);
  auto ids_ptr = std::make_shared<Tensor<std::int32_t>>(std::move(ids));
  return t.emit(std::move(out), {table.id}, [table, ids_ptr](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& tab = tp.value(table);
    const std::int64_t d = tab.extent(1);
    Tensor<S> gt(tab.shape());
    for (std::int64_t i = 0; i < ids_ptr->numel(); ++i) {
      S* row = gt.data() + static_cast<std::int64_t>((*ids_ptr)[i]) * d;
      const S* src = g.data() + i * d;
      for (std::int64_t j = 0; j < d; ++j) row[j] += src[j];
    }
    tp.add_grad(table, gt);
  });
}

template <typename S>
Var reshape(Tape<S>& t, Var x, Shape shape) {
  const Shape original = t.value(x).shape();
  return t.emit(t.value(x).reshaped(std::move(shape)), {x.id}, [x, original](Tape<S>& tp, int self) {
    tp.add_grad(x, tp.grad(Var{self})->reshaped(original));
  });
}

template <typename S>
Var sum(Tape<S>& t, Var x) {
  S total{0};
  const Tensor<S>& xv = t.value(x);
  for (std::int64_t i = 0; i < xv.numel(); ++i) total += xv[i];
  return t.emit(Tensor<S>::scalar(total), {x.id}, [x](Tape<S>& tp, int self) {
    const S g = (*tp.grad(Var{self}))[0];
    tp.add_grad(x, Tensor<S>::full(tp.value(x).shape(), g));
  });
}

template <typename S>
Var cross_entropy(Tape<S>& t, Var logits, Tensor<std::int32_t> labels) {
  auto probs = std::make_shared<Tensor<S>>();
  Tensor<S> loss = k_cross_entropy(t.value(logits), labels, probs.get());
  auto labels_ptr = std::make_shared<Tensor<std::int32_t>>(std::move(labels));
  return t.emit(std::move(loss), {logits.id}, [logits, probs, labels_ptr](Tape<S>& tp, int self) {
    const S g = (*tp.grad(Var{self}))[0];
    const std::int64_t B = probs->extent(0), C = probs->extent(1);
    Tensor<S> gl({B, C});
    const S inv_b = g / static_cast<S>(B);
    for (std::int64_t i = 0; i < B; ++i) {
      for (std::int64_t j = 0; j < C; ++j) gl(i, j) = (*probs)(i, j) * inv_b;
      gl(i, (*labels_ptr)[i]) -= inv_b;
    }
    tp.add_grad(logits, gl);
  });
}

// T^2-scaled KL(teacher || student) at temperature T, batch-averaged.
// The teacher enters as plain data, so gradients reach the student only.
template <typename S>
Var kl_distill(Tape<S>& t, Var student_logits, const Tensor<S>& teacher_logits, S temperature) {
  if (temperature <= S{0}) throw ContractError("kl_distill: temperature must be positive");
  const Tensor<S>& sv = t.value(student_logits);
  require_same_shape(sv, teacher_logits, "kl_distill");
  const std::int64_t B = sv.extent(0), C = sv.extent(1);
  const S inv_t = S{1} / temperature;
  auto p = std::make_shared<Tensor<S>>(k_softmax(k_scale(teacher_logits, inv_t), 1));
  auto q = std::make_shared<Tensor<S>>(k_softmax(k_scale(sv, inv_t), 1));
  S total{0};
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t j = 0; j < C; ++j) {
      const S pij = (*p)(i, j);
      if (pij > S{0}) total += pij * (std::log(pij) - std::log((*q)(i, j)));
    }
  Tensor<S> loss = Tensor<S>::scalar(temperature * temperature * total / static_cast<S>(B));
  check_finite(loss, "kl_distill");
  return t.emit(std::move(loss), {student_logits.id},
                [student_logits, p, q, temperature, B, C](Tape<S>& tp, int self) {
                  const S g = (*tp.grad(Var{self}))[0];
                  const S c = g * temperature / static_cast<S>(B);
                  Tensor<S> gs({B, C});
                  for (std::int64_t i = 0; i < B * C; ++i) gs[i] = c * ((*q)[i] - (*p)[i]);
                  tp.add_grad(student_logits, gs);
                });
}

template <typename S>
Var attention(Tape<S>& t, Var q, Var k, Var v, std::int64_t n_heads) {
  auto probs = std::make_shared<Tensor<S>>();
  Tensor<S> out = k_attention(t.value(q), t.value(k), t.value(v), n_heads, probs.get());
  return t.emit(std::move(out), {q.id, k.id, v.id}, [q, k, v, n_heads, probs](Tape<S>& tp, int self) {
    const Tensor<S>& g = *tp.grad(Var{self});
    const Tensor<S>& qv = tp.value(q);
    const Tensor<S>& kv = tp.value(k);
    const Tensor<S>& vv = tp.value(v);
    const std::int64_t B = qv.extent(0), L = qv.extent(1), hd = qv.extent(2);
    const std::int64_t dh = hd / n_heads;
    const S sc = S{1} / std::sqrt(static_cast<S>(dh));
    Tensor<S> gq(qv.shape()), gk(qv.shape()), gv(qv.shape());
    EigenMat<S> dP(L, L), dS(L, L);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t h = 0; h < n_heads; ++h) {
        const std::int64_t off = (b * L) * hd + h * dh;
        StridedView<S> Q(qv.data() + off, L, dh, Eigen::OuterStride<>(hd));
        StridedView<S> K(kv.data() + off, L, dh, Eigen::OuterStride<>(hd));
        StridedView<S> V(vv.data() + off, L, dh, Eigen::OuterStride<>(hd));
        StridedView<S> dO(g.data() + off, L, dh, Eigen::OuterStride<>(hd));
        Eigen::Map<const EigenMat<S>> P(probs->data() + ((b * n_heads + h) * L) * L, L, L);
        StridedViewMut<S> dV(gv.data() + off, L, dh, Eigen::OuterStride<>(hd));
        dV.noalias() = P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        for (std::int64_t i = 0; i < L; ++i) {
          S dot{0};
          for (std::int64_t j = 0; j < L; ++j) dot += dP(i, j) * P(i, j);
          for (std::int64_t j = 0; j < L; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
        }
        StridedViewMut<S> dQ(gq.data() + off, L, dh, Eigen::OuterStride<>(hd));
        dQ.noalias() = dS * K;
        StridedViewMut<S> dK(gk.data() + off, L, dh, Eigen::OuterStride<>(hd));
        dK.noalias() = dS.transpose() * Q;
      }
    }
    tp.add_grad(q, gq);
    tp.add_grad(k, gk);
    tp.add_grad(v, gv);
  });
}

// Inverted dropout; the scaled keep-mask is saved for backward. rate <= 0 is
// an identity that consumes no randomness.
template <typename S>
Var dropout(Tape<S>& t, Var x, S rate, Rng& rng) {
  if (rate <= S{0}) return x;
  if (rate >= S{1}) throw ContractError("dropout: rate must be < 1");
  const Tensor<S>& xv = t.value(x);
  const S keep_inv = S{1} / (S{1} - rate);
  auto mask = std::make_shared<Tensor<S>>(xv.shape());
  Tensor<S> y(xv.shape());
  for (std::int64_t i = 0; i < xv.numel(); ++i) {
    const S m = static_cast<S>(rng.uniform()) < rate ? S{0} : keep_inv;
    (*mask)[i] = m;
    y[i] = xv[i] * m;
  }
  return t.emit(std::move(y), {x.id}, [x, mask](Tape<S>& tp, int self) {
    tp.add_grad(x, k_mul(*tp.grad(Var{self}), *mask));
  });
}

template <typename S>
Var linear(Tape<S>& t, Var x, Var w, Var b) {
  return t.emit(k_linear(t.value(x), t.value(w), t.value(b)), {x.id, w.id, b.id},
                [x, w, b](Tape<S>& tp, int self) {
                  const Tensor<S>& g = *tp.grad(Var{self});
                  const Tensor<S>& xv = tp.value(x);
                  const Tensor<S>& wv = tp.value(w);
                  const std::int64_t r = xv.extent(0), in = xv.extent(1), out = wv.extent(0);
                  Tensor<S> gx({r, in});
                  mat_view(gx, r, in).noalias() = mat_view(g, r, out) * mat_view(wv, out, in);
                  tp.add_grad(x, gx);
                  Tensor<S> gw({out, in});
                  mat_view(gw, out, in).noalias() = mat_view(g, r, out).transpose() * mat_view(xv, r, in);
                  tp.add_grad(w, gw);
                  Tensor<S> gb({out});
                  for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < out; ++j) gb[j] += g(i, j);
                  tp.add_grad(b, gb);
                });
}

// Elementwise product with a constant mask; grad_W = upstream (*) mask.
template <typename S>
Var masked(Tape<S>& t, Var w, Tensor<S> mask) {
  Tensor<S> out = k_mul(t.value(w), mask);
  auto mask_ptr = std::make_shared<Tensor<S>>(std::move(mask));
  return t.emit(std::move(out), {w.id}, [w, mask_ptr](Tape<S>& tp, int self) {
    tp.add_grad(w, k_mul(*tp.grad(Var{self}), *mask_ptr));
  });
}

}  // namespace blockprune
