#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "blockprune/model.hpp"

namespace blockprune {

// Symmetric int8 weights with one scale per output row. An all-zero row has
// scale 1 and quantizes to zeros.
struct QuantTensor {
  Tensor<std::int8_t> q;
  Tensor<float> scales;  // one per row
};

QuantTensor quantize_tensor(const Tensor<float>& w);
Tensor<float> dequantize(const QuantTensor& qt);

// Weight-only quantization of the six linear families; everything else stays
// float. Evaluation dequantizes on use.
struct QuantModel {
  Model shell;  // original structure; family weights are replaced on materialize
  std::vector<std::array<QuantTensor, 6>> weights;

  Model materialize() const;
};

QuantModel quantize_model(const Model& compact_model);

struct SizeReport {
  std::int64_t linear_params = 0;          // this model
  std::int64_t dense_baseline_params = 0;  // uncompacted dense geometry
  std::int64_t float_bytes = 0;            // this model at float32
  std::int64_t quant_bytes = 0;            // int8 payload + float scales
  double byte_ratio = 0.0;                 // float_bytes / quant_bytes
  double structural_compression = 0.0;     // baseline params / this params
  double combined_compression = 0.0;       // baseline float bytes / quant bytes
};

SizeReport quant_size_report(const Model& compact_model);

}  // namespace blockprune
