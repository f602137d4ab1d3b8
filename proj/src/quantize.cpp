#include "blockprune/quantize.hpp"

#include <cmath>

namespace blockprune {

QuantTensor quantize_tensor(const Tensor<float>& w) {
  if (w.ndim() != 2) throw ShapeError("quantize: expected a matrix");
  if (!w.all_finite()) throw RunError("quantize: non-finite weight");
  const std::int64_t rows = w.extent(0), cols = w.extent(1);
  QuantTensor out;
  out.q = Tensor<std::int8_t>({rows, cols});
  out.scales = Tensor<float>({rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    float amax = 0.0f;
    for (std::int64_t c = 0; c < cols; ++c) amax = std::max(amax, std::abs(w(r, c)));
    if (amax == 0.0f) {
      out.scales[r] = 1.0f;
      for (std::int64_t c = 0; c < cols; ++c) out.q(r, c) = 0;
      continue;
    }
    const float scale = amax / 127.0f;
    out.scales[r] = scale;
    for (std::int64_t c = 0; c < cols; ++c) {
      // round half away from zero on the double quotient, then clamp
      const double t = std::round(static_cast<double>(w(r, c)) / static_cast<double>(scale));
      const double clamped = std::min(127.0, std::max(-127.0, t));
      out.q(r, c) = static_cast<std::int8_t>(clamped);
    }
  }
  return out;
}

Tensor<float> dequantize(const QuantTensor& qt) {
  const std::int64_t rows = qt.q.extent(0), cols = qt.q.extent(1);
  Tensor<float> out({rows, cols});
  for (std::int64_t r = 0; r < rows; ++r) {
    const float s = qt.scales[r];
    for (std::int64_t c = 0; c < cols; ++c) out(r, c) = static_cast<float>(qt.q(r, c)) * s;
  }
  return out;
}

Model QuantModel::materialize() const {
  Model m = shell;
  for (std::size_t li = 0; li < m.layers.size(); ++li)
    for (Family f : kFamilies)
      m.layers[li].lin(f).w = dequantize(weights[li][static_cast<std::size_t>(static_cast<int>(f))]);
  return m;
}

QuantModel quantize_model(const Model& compact_model) {
  QuantModel qm;
  qm.shell = compact_model;
  qm.weights.resize(compact_model.layers.size());
  for (std::size_t li = 0; li < compact_model.layers.size(); ++li)
    for (Family f : kFamilies) {
      auto& slot = qm.weights[li][static_cast<std::size_t>(static_cast<int>(f))];
      slot = quantize_tensor(compact_model.layers[li].lin(f).w);
      qm.shell.layers[li].lin(f).w = Tensor<float>::zeros(compact_model.layers[li].lin(f).w.shape());
    }
  return qm;
}

SizeReport quant_size_report(const Model& compact_model) {
  SizeReport r;
  const ModelConfig& cfg = compact_model.cfg;
  r.dense_baseline_params = cfg.n_layers * (4 * cfg.d_model * cfg.d_model + 2 * cfg.d_model * cfg.d_ff);
  std::int64_t scale_rows = 0;
  for (const EncoderLayer& layer : compact_model.layers)
    for (Family f : kFamilies) {
      const Tensor<float>& w = layer.lin(f).w;
      r.linear_params += w.numel();
      scale_rows += w.extent(0);
    }
  r.float_bytes = r.linear_params * 4;
  r.quant_bytes = r.linear_params * 1 + scale_rows * 4;
  r.byte_ratio = static_cast<double>(r.float_bytes) / static_cast<double>(r.quant_bytes);
  r.structural_compression = static_cast<double>(r.dense_baseline_params) / static_cast<double>(r.linear_params);
  r.combined_compression =
      static_cast<double>(r.dense_baseline_params * 4) / static_cast<double>(r.quant_bytes);
  return r;
}

}  // namespace blockprune
