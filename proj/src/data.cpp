#include "blockprune/data.hpp"

#include <algorithm>
#include <fstream>

#include "blockprune/errors.hpp"

namespace blockprune {

Tensor<std::int32_t> Dataset::rows(const std::vector<std::int64_t>& index, std::int64_t from,
                                   std::int64_t to) const {
  const std::int64_t L = seq_len();
  Tensor<std::int32_t> out({to - from, L});
  for (std::int64_t r = from; r < to; ++r) {
    const std::int32_t* src = ids.data() + index[static_cast<std::size_t>(r)] * L;
    std::int32_t* dst = out.data() + (r - from) * L;
    for (std::int64_t j = 0; j < L; ++j) dst[j] = src[j];
  }
  return out;
}

Tensor<std::int32_t> Dataset::slice(std::int64_t from, std::int64_t to) const {
  const std::int64_t L = seq_len();
  Tensor<std::int32_t> out({to - from, L});
  for (std::int64_t r = from; r < to; ++r)
    for (std::int64_t j = 0; j < L; ++j) out[(r - from) * L + j] = ids[r * L + j];
  return out;
}

void TaskSpec::validate() const {
  if (kind != "synth:needle" && kind != "synth:pairdup" && kind != "synth:majority" && kind != "file:tsv")
    throw ContractError("task: unknown kind '" + kind + "'");
  if (seq_len < 8) throw ContractError("task: seq_len must be >= 8");
  if (kind != "file:tsv" && (train_size <= 0 || dev_size <= 0))
    throw ContractError("task: split sizes must be positive");
  if (kind == "file:tsv" && path.empty()) throw ContractError("task: file:tsv requires a path");
}

namespace {

constexpr std::int32_t kNeedle = kByteOffset + 42;
constexpr std::int32_t kPairAlphabet = 16;

void gen_needle(Rng& rng, std::int32_t* row, std::int64_t L, std::int32_t* label) {
  row[0] = kClsToken;
  const std::int64_t content = L - 1;
  for (std::int64_t j = 0; j < content; ++j) {
    std::int32_t tok;
    do {
      tok = kByteOffset + static_cast<std::int32_t>(rng.uniform_int(256));
    } while (tok == kNeedle);
    row[1 + j] = tok;
  }
  *label = rng.uniform() < 0.5 ? 1 : 0;
  if (*label == 1) row[1 + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(content)))] = kNeedle;
}

void gen_pairdup(Rng& rng, std::int32_t* row, std::int64_t L, std::int32_t* label) {
  const std::int64_t k = (L - 2) / 2;
  for (std::int64_t j = 0; j < L; ++j) row[j] = kPadToken;
  row[0] = kClsToken;
  row[1 + k] = kSepToken;
  std::int32_t* s1 = row + 1;
  std::int32_t* s2 = row + 2 + k;
  for (std::int64_t j = 0; j < k; ++j) s1[j] = kByteOffset + static_cast<std::int32_t>(rng.uniform_int(kPairAlphabet));
  *label = rng.uniform() < 0.5 ? 1 : 0;
  if (*label == 1) {
    for (std::int64_t j = 0; j < k; ++j) s2[j] = s1[j];
    if (rng.uniform() < 0.5) {  // near-duplicate: one substitution
      const std::int64_t pos = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(k)));
      std::int32_t tok;
      do {
        tok = kByteOffset + static_cast<std::int32_t>(rng.uniform_int(kPairAlphabet));
      } while (tok == s1[pos]);
      s2[pos] = tok;
    }
  } else {
    while (true) {
      std::int64_t differing = 0;
      for (std::int64_t j = 0; j < k; ++j) {
        s2[j] = kByteOffset + static_cast<std::int32_t>(rng.uniform_int(kPairAlphabet));
        if (s2[j] != s1[j]) ++differing;
      }
      if (differing >= 2) break;  // keep negatives away from the near-duplicate boundary
    }
  }
}

void gen_majority(Rng& rng, std::int32_t* row, std::int64_t L, std::int32_t* label) {
  row[0] = kClsToken;
  const std::int64_t content = L - 1;
  const double p = rng.uniform(0.25, 0.75);
  std::int64_t count_a = 0;
  for (std::int64_t j = 0; j < content; ++j) {
    const bool a = rng.uniform() < p;
    row[1 + j] = kByteOffset + (a ? 0 : 1);
    if (a) ++count_a;
  }
  if (2 * count_a == content) {  // break ties: promote a fair-coin winner
    const std::int32_t winner = rng.uniform() < 0.5 ? 0 : 1;
    for (std::int64_t j = L - 1; j >= 1; --j) {
      if (row[j] == kByteOffset + (1 - winner)) {
        row[j] = kByteOffset + winner;
        if (winner == 0) ++count_a;
        else --count_a;
        break;
      }
    }
  }
  *label = 2 * count_a > content ? 1 : 0;
}

}  // namespace

Dataset gen_synth(const TaskSpec& spec, std::int64_t count, std::int64_t first_index) {
  spec.validate();
  Dataset d;
  d.ids = Tensor<std::int32_t>({count, spec.seq_len});
  d.labels.resize(static_cast<std::size_t>(count));
  d.n_classes = 2;
  Rng base(spec.seed);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng = base.fork(static_cast<std::uint64_t>(first_index + i));
    std::int32_t* row = d.ids.data() + i * spec.seq_len;
    std::int32_t label = 0;
    if (spec.kind == "synth:needle")
      gen_needle(rng, row, spec.seq_len, &label);
    else if (spec.kind == "synth:pairdup")
      gen_pairdup(rng, row, spec.seq_len, &label);
    else if (spec.kind == "synth:majority")
      gen_majority(rng, row, spec.seq_len, &label);
    else
      throw ContractError("gen_synth: not a synthetic task kind");
    d.labels[static_cast<std::size_t>(i)] = label;
  }
  d.label_names = {"0", "1"};
  return d;
}

std::pair<Dataset, Dataset> make_task(const TaskSpec& spec) {
  spec.validate();
  if (spec.kind == "file:tsv") {
    Dataset all = ingest_tsv(spec.path, spec.seq_len);
    const std::int64_t n = all.size();
    if (n < 2) throw RunError("file task needs at least 2 examples");
    // deterministic shuffle, then dev takes the tail
    std::vector<std::int64_t> index(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) index[static_cast<std::size_t>(i)] = i;
    Rng rng(spec.seed);
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      std::swap(index[static_cast<std::size_t>(i)], index[static_cast<std::size_t>(j)]);
    }
    const std::int64_t dev_n = std::max<std::int64_t>(1, std::min(spec.dev_size, n / 5));
    Dataset train, dev;
    train.n_classes = dev.n_classes = all.n_classes;
    train.label_names = dev.label_names = all.label_names;
    train.ids = all.rows(index, 0, n - dev_n);
    dev.ids = all.rows(index, n - dev_n, n);
    for (std::int64_t i = 0; i < n - dev_n; ++i)
      train.labels.push_back(all.labels[static_cast<std::size_t>(index[static_cast<std::size_t>(i)])]);
    for (std::int64_t i = n - dev_n; i < n; ++i)
      dev.labels.push_back(all.labels[static_cast<std::size_t>(index[static_cast<std::size_t>(i)])]);
    return {std::move(train), std::move(dev)};
  }
  Dataset train = gen_synth(spec, spec.train_size, 0);
  Dataset dev = gen_synth(spec, spec.dev_size, spec.train_size);
  return {std::move(train), std::move(dev)};
}

Dataset ingest_tsv(const std::string& path, std::int64_t seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot open dataset file: " + path);
  Dataset d;
  std::vector<std::vector<std::int32_t>> rows;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw RunError("malformed line " + std::to_string(line_no) + " in " + path + ": expected label<TAB>text");
    const std::string label = line.substr(0, tab);
    const std::string text = line.substr(tab + 1);
    std::int32_t label_id;
    auto it = std::find(d.label_names.begin(), d.label_names.end(), label);
    if (it == d.label_names.end()) {
      d.label_names.push_back(label);
      label_id = static_cast<std::int32_t>(d.label_names.size()) - 1;
    } else {
      label_id = static_cast<std::int32_t>(it - d.label_names.begin());
    }
    std::vector<std::int32_t> toks(static_cast<std::size_t>(seq_len), kPadToken);
    toks[0] = kClsToken;
    for (std::size_t i = 0; i < text.size() && i + 1 < static_cast<std::size_t>(seq_len); ++i)
      toks[i + 1] = kByteOffset + static_cast<std::int32_t>(static_cast<unsigned char>(text[i]));
    rows.push_back(std::move(toks));
    d.labels.push_back(label_id);
  }
  if (rows.empty()) throw RunError("dataset file is empty: " + path);
  d.n_classes = static_cast<std::int64_t>(d.label_names.size());
  d.ids = Tensor<std::int32_t>({static_cast<std::int64_t>(rows.size()), seq_len});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::int64_t j = 0; j < seq_len; ++j) d.ids[static_cast<std::int64_t>(r) * seq_len + j] = rows[r][static_cast<std::size_t>(j)];
  return d;
}

std::string decode_tokens(const Tensor<std::int32_t>& ids, std::int64_t row) {
  const std::int64_t L = ids.extent(1);
  std::string out;
  for (std::int64_t j = 0; j < L; ++j) {
    const std::int32_t t = ids[row * L + j];
    if (t >= kByteOffset) out.push_back(static_cast<char>(t - kByteOffset));
  }
  return out;
}

}  // namespace blockprune
