#pragma once

#include <json.hpp>
#include <optional>
#include <string>

#include "blockprune/model.hpp"
#include "blockprune/quantize.hpp"

namespace blockprune {

// Checkpoint directory layout: config.json (schema-versioned UTF-8) plus
// tensors.bin. The binary file is little-endian: magic "BMP1", u32 format
// version (=1), u32 tensor count, then an index of {u16 name length, name,
// u8 ndim, ndim x u64 dims, u8 dtype (0 = float32, 1 = int8), u64 payload
// offset}; payloads are row-major and 64-byte aligned.
void save_checkpoint(const std::string& dir, const Model& model, const PruneState* prune = nullptr,
                     const QuantModel* quant = nullptr, const nlohmann::json& extra = {});

struct Checkpoint {
  Model model;  // for quantized checkpoints: the materialized-at-zero shell
  std::optional<PruneState> prune;
  std::optional<QuantModel> quant;
  nlohmann::json config;
};

Checkpoint load_checkpoint(const std::string& dir);

}  // namespace blockprune
