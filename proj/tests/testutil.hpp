#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "blockprune/ops.hpp"
#include "blockprune/rng.hpp"
#include "blockprune/tape.hpp"
#include "blockprune/tensor.hpp"

namespace bptest {

using blockprune::Rng;
using blockprune::Shape;
using blockprune::Tape;
using blockprune::Tensor;
using blockprune::Var;

inline Tensor<double> randt(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

inline Tensor<std::int32_t> randids(Rng& rng, Shape shape, std::int32_t n) {
  Tensor<std::int32_t> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<std::int32_t>(rng.uniform_int(n));
  return t;
}

// Independent oracle for every differentiable op: central finite differences
// of the scalar loss built by `make_loss`, compared entry-by-entry against
// the tape gradients. `make_loss` must be a pure function of its inputs so
// repeated evaluation is consistent.
template <typename Fn>
double fd_max_rel_err(Fn&& make_loss, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.leaf(in));
  Var loss = make_loss(tape, vars);
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (Var v : vars) {
    const Tensor<double>* g = tape.grad(v);
    analytic.push_back(g ? *g : Tensor<double>::zeros(tape.value(v).shape()));
  }

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> t2;
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const auto& x : xs) vs.push_back(t2.leaf(x));
    return t2.value(make_loss(t2, vs))[0];
  };

  double max_rel = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<Tensor<double>> xs = inputs;
      const double x0 = inputs[k][i];
      const double step = h * std::max(1.0, std::abs(x0));
      xs[k][i] = x0 + step;
      const double fp = eval(xs);
      xs[k][i] = x0 - step;
      const double fm = eval(xs);
      const double fd = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(xs), ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace bptest
