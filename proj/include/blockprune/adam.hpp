#pragma once

#include <cmath>
#include <cstdint>

#include "blockprune/tensor.hpp"

namespace blockprune {

template <typename S>
struct AdamState {
  Tensor<S> m;
  Tensor<S> v;
  std::int64_t t = 0;

  static AdamState like(const Tensor<S>& param) {
    return AdamState{Tensor<S>::zeros(param.shape()), Tensor<S>::zeros(param.shape()), 0};
  }
};

template <typename S>
struct AdamConfig {
  S lr = static_cast<S>(5e-4);
  S beta1 = static_cast<S>(0.9);
  S beta2 = static_cast<S>(0.98);
  S eps = static_cast<S>(1e-8);
  S weight_decay = static_cast<S>(0.0);  // decoupled; applied to weights, never to scores
};

// Bias-corrected Adam with decoupled weight decay, in place.
template <typename S>
void adam_step(Tensor<S>& param, const Tensor<S>& grad, AdamState<S>& state, const AdamConfig<S>& cfg) {
  require_same_shape(param, grad, "adam_step");
  require_same_shape(param, state.m, "adam_step");
  state.t += 1;
  const S bc1 = S{1} - std::pow(cfg.beta1, static_cast<S>(state.t));
  const S bc2 = S{1} - std::pow(cfg.beta2, static_cast<S>(state.t));
  const std::int64_t n = param.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (S{1} - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (S{1} - cfg.beta2) * g * g;
    const S mhat = state.m[i] / bc1;
    const S vhat = state.v[i] / bc2;
    param[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * param[i]);
  }
}

}  // namespace blockprune
