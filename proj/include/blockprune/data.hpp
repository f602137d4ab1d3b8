#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "blockprune/rng.hpp"
#include "blockprune/tensor.hpp"

namespace blockprune {

// Token space: byte values shifted up to make room for specials.
constexpr std::int32_t kPadToken = 0;
constexpr std::int32_t kClsToken = 1;
constexpr std::int32_t kSepToken = 2;
constexpr std::int32_t kByteOffset = 3;
constexpr std::int64_t kByteVocab = 256 + kByteOffset;

struct Dataset {
  Tensor<std::int32_t> ids;  // [n, seq_len]
  std::vector<std::int32_t> labels;
  std::int64_t n_classes = 2;
  std::vector<std::string> label_names;

  std::int64_t size() const { return ids.empty() ? 0 : ids.extent(0); }
  std::int64_t seq_len() const { return ids.empty() ? 0 : ids.extent(1); }

  Tensor<std::int32_t> rows(const std::vector<std::int64_t>& index, std::int64_t from, std::int64_t to) const;
  Tensor<std::int32_t> slice(std::int64_t from, std::int64_t to) const;
};

struct TaskSpec {
  std::string kind = "synth:pairdup";  // synth:needle | synth:pairdup | synth:majority | file:tsv
  std::int64_t train_size = 2000;
  std::int64_t dev_size = 512;
  std::uint64_t seed = 1;
  std::int64_t seq_len = 32;
  std::string path;  // file:tsv only

  void validate() const;
};

// Deterministic synthetic corpora. Example i is generated from an rng forked
// on its global index; train uses indices [0, train_size) and dev
// [train_size, train_size + dev_size), so the splits are disjoint by
// construction.
Dataset gen_synth(const TaskSpec& spec, std::int64_t count, std::int64_t first_index);
std::pair<Dataset, Dataset> make_task(const TaskSpec& spec);

// "label<TAB>text" lines, byte-level tokens, truncated/padded to seq_len.
Dataset ingest_tsv(const std::string& path, std::int64_t seq_len);

// Inverse of byte tokenization (specials dropped); test support.
std::string decode_tokens(const Tensor<std::int32_t>& ids, std::int64_t row);

}  // namespace blockprune
