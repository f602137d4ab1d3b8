#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "blockprune/bench.hpp"
#include "blockprune/checkpoint.hpp"
#include "blockprune/data.hpp"
#include "blockprune/trainer.hpp"
#include "testutil.hpp"

using namespace blockprune;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const char* name) {
  return (fs::temp_directory_path() / name).string();
}

std::int64_t count_token(const Dataset& d, std::int64_t row, std::int32_t tok) {
  std::int64_t n = 0;
  for (std::int64_t j = 0; j < d.seq_len(); ++j)
    if (d.ids[row * d.seq_len() + j] == tok) ++n;
  return n;
}

}  // namespace

TEST_CASE("needle: label equals needle presence; balance in range") {
  TaskSpec spec;
  spec.kind = "synth:needle";
  spec.seq_len = 24;
  spec.seed = 7;
  Dataset d = gen_synth(spec, 10000, 0);
  constexpr std::int32_t kNeedle = kByteOffset + 42;
  std::int64_t positives = 0;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const bool has = count_token(d, i, kNeedle) > 0;
    CHECK(has == (d.labels[static_cast<std::size_t>(i)] == 1));
    positives += d.labels[static_cast<std::size_t>(i)];
  }
  const double rate = static_cast<double>(positives) / static_cast<double>(d.size());
  CHECK(rate >= 0.45);
  CHECK(rate <= 0.55);
}

TEST_CASE("pairdup: duplicates are near-identical, negatives are far; balance") {
  TaskSpec spec;
  spec.kind = "synth:pairdup";
  spec.seq_len = 26;
  spec.seed = 9;
  Dataset d = gen_synth(spec, 10000, 0);
  const std::int64_t k = (spec.seq_len - 2) / 2;
  std::int64_t positives = 0;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const std::int32_t* row = d.ids.data() + i * spec.seq_len;
    CHECK(row[0] == kClsToken);
    CHECK(row[1 + k] == kSepToken);
    std::int64_t differing = 0;
    for (std::int64_t j = 0; j < k; ++j)
      if (row[1 + j] != row[2 + k + j]) ++differing;
    if (d.labels[static_cast<std::size_t>(i)] == 1) {
      CHECK(differing <= 1);
      ++positives;
    } else {
      CHECK(differing >= 2);
    }
  }
  const double rate = static_cast<double>(positives) / static_cast<double>(d.size());
  CHECK(rate >= 0.45);
  CHECK(rate <= 0.55);
}

TEST_CASE("majority: label matches the dominant token; balance") {
  TaskSpec spec;
  spec.kind = "synth:majority";
  spec.seq_len = 17;
  spec.seed = 11;
  Dataset d = gen_synth(spec, 10000, 0);
  std::int64_t positives = 0;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const std::int64_t a = count_token(d, i, kByteOffset + 0);
    const std::int64_t b = count_token(d, i, kByteOffset + 1);
    CHECK(a + b == spec.seq_len - 1);
    CHECK(a != b);
    CHECK((a > b) == (d.labels[static_cast<std::size_t>(i)] == 1));
    positives += d.labels[static_cast<std::size_t>(i)];
  }
  const double rate = static_cast<double>(positives) / static_cast<double>(d.size());
  CHECK(rate >= 0.45);
  CHECK(rate <= 0.55);
}

TEST_CASE("splits are deterministic and index-disjoint") {
  TaskSpec spec;
  spec.kind = "synth:needle";
  spec.train_size = 64;
  spec.dev_size = 32;
  spec.seq_len = 16;
  auto [train1, dev1] = make_task(spec);
  auto [train2, dev2] = make_task(spec);
  CHECK(bptest::bitwise_equal(train1.ids, train2.ids));
  CHECK(bptest::bitwise_equal(dev1.ids, dev2.ids));
  // dev examples come from the index range after the train split
  Dataset dev_expected = gen_synth(spec, spec.dev_size, spec.train_size);
  CHECK(bptest::bitwise_equal(dev1.ids, dev_expected.ids));
}

TEST_CASE("tsv ingestion: errors, roundtrip, label mapping") {
  const std::string empty = temp_path("bp_empty.tsv");
  std::ofstream(empty).close();
  CHECK_THROWS_AS(ingest_tsv(empty, 16), RunError);

  const std::string ok = temp_path("bp_ok.tsv");
  {
    std::ofstream f(ok);
    f << "pos\thello world\n";
    f << "neg\tbye\n";
    f << "pos\thello again, longer than the limit for sure\n";
  }
  Dataset d = ingest_tsv(ok, 16);
  CHECK(d.size() == 3);
  CHECK(d.n_classes == 2);
  CHECK(d.label_names == std::vector<std::string>{"pos", "neg"});
  CHECK(d.labels == std::vector<std::int32_t>{0, 1, 0});
  CHECK(decode_tokens(d.ids, 0) == "hello world");
  CHECK(decode_tokens(d.ids, 1) == "bye");
  // truncation keeps a max_len-1 byte prefix after the leading marker
  const std::string full = "hello again, longer than the limit for sure";
  CHECK(decode_tokens(d.ids, 2) == full.substr(0, 15));

  const std::string bad = temp_path("bp_bad.tsv");
  {
    std::ofstream f(bad);
    f << "pos\tfine\n";
    f << "no-tab-here\n";
  }
  try {
    ingest_tsv(bad, 16);
    CHECK(false);
  } catch (const RunError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("checkpoint roundtrip is bitwise and the binary format is as documented") {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.n_layers = 2;
  cfg.vocab_size = kByteVocab;
  cfg.max_len = 8;
  cfg.dropout = 0.0f;
  Rng rng(1);
  Model m = Model::init(cfg, rng);
  PruneState prune = attach_method(m, Method::Hybrid, 8);
  Rng srng(2);
  for (auto& g : prune.groups) g.scores = Tensor<float>::uniform(g.scores.shape(), srng, -0.5f, 0.5f);

  const std::string dir = temp_path("bp_ckpt");
  fs::remove_all(dir);
  save_checkpoint(dir, m, &prune, nullptr, nlohmann::json{{"metrics", {{"accuracy", 0.5}}}});

  Checkpoint ck = load_checkpoint(dir);
  auto pa = m.params();
  auto pb = ck.model.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bptest::bitwise_equal(*pa[i].tensor, *pb[i].tensor));
  REQUIRE(ck.prune.has_value());
  REQUIRE(ck.prune->groups.size() == prune.groups.size());
  for (std::size_t g = 0; g < prune.groups.size(); ++g)
    CHECK(bptest::bitwise_equal(ck.prune->groups[g].scores, prune.groups[g].scores));

  // masked evaluation metrics reproduce bitwise
  TaskSpec spec;
  spec.kind = "synth:needle";
  spec.train_size = 32;
  spec.dev_size = 32;
  spec.seq_len = 8;
  auto [train, dev] = make_task(spec);
  (void)train;
  MaskSet masks_a = prune.masks(m);
  MaskSet masks_b = ck.prune->masks(ck.model);
  const EvalResult ea = evaluate(m, dev, &masks_a);
  const EvalResult eb = evaluate(ck.model, dev, &masks_b);
  CHECK(ea.accuracy == eb.accuracy);
  CHECK(ea.loss == eb.loss);

  // independent header parse: magic, version, count, alignment, dtypes
  std::ifstream bin(dir + "/tensors.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() > 12);
  CHECK(bytes.substr(0, 4) == "BMP1");
  auto u32 = [&](std::size_t o) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[o + static_cast<std::size_t>(i)]);
    return v;
  };
  auto u64 = [&](std::size_t o) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[o + static_cast<std::size_t>(i)]);
    return v;
  };
  CHECK(u32(4) == 1);
  const std::uint32_t count = u32(8);
  CHECK(count > 0);
  std::size_t o = 12;
  bool saw_int8_mask = false;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[o]) |
                                                              (static_cast<unsigned char>(bytes[o + 1]) << 8));
    o += 2;
    const std::string name = bytes.substr(o, name_len);
    o += name_len;
    const int ndim = static_cast<unsigned char>(bytes[o++]);
    std::int64_t numel = 1;
    for (int dd = 0; dd < ndim; ++dd) {
      numel *= static_cast<std::int64_t>(u64(o));
      o += 8;
    }
    const int dtype = static_cast<unsigned char>(bytes[o++]);
    CHECK((dtype == 0 || dtype == 1));
    if (dtype == 1 && name.find(".mask") != std::string::npos) saw_int8_mask = true;
    const std::uint64_t offset = u64(o);
    o += 8;
    CHECK(offset % 64 == 0);  // payloads are 64-byte aligned
    CHECK(offset + static_cast<std::uint64_t>(numel * (dtype == 0 ? 4 : 1)) <= bytes.size());
  }
  CHECK(saw_int8_mask);
}

TEST_CASE("quantized checkpoint roundtrip preserves codes and scales") {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.n_layers = 1;
  cfg.vocab_size = 32;
  cfg.max_len = 8;
  cfg.dropout = 0.0f;
  Rng rng(3);
  Model m = Model::init(cfg, rng);
  QuantModel qm = quantize_model(m);
  const std::string dir = temp_path("bp_qckpt");
  fs::remove_all(dir);
  save_checkpoint(dir, m, nullptr, &qm);
  Checkpoint ck = load_checkpoint(dir);
  REQUIRE(ck.quant.has_value());
  for (std::size_t li = 0; li < qm.weights.size(); ++li)
    for (Family f : kFamilies) {
      const auto fi = static_cast<std::size_t>(static_cast<int>(f));
      CHECK(bptest::bitwise_equal(ck.quant->weights[li][fi].q, qm.weights[li][fi].q));
      CHECK(bptest::bitwise_equal(ck.quant->weights[li][fi].scales, qm.weights[li][fi].scales));
    }
  Rng drng(4);
  Tensor<std::int32_t> ids({3, 8});
  for (std::int64_t i = 0; i < ids.numel(); ++i)
    ids[i] = static_cast<std::int32_t>(drng.uniform_int(32));
  CHECK(bptest::bitwise_equal(forward_logits(qm.materialize(), ids), forward_logits(ck.quant->materialize(), ids)));
}

TEST_CASE("timing: self comparison lands near 1.0") {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.n_layers = 1;
  cfg.vocab_size = 32;
  cfg.max_len = 8;
  cfg.dropout = 0.0f;
  Rng rng(5);
  Model m = Model::init(cfg, rng);
  Tensor<std::int32_t> ids({64, 8});
  for (std::int64_t i = 0; i < ids.numel(); ++i)
    ids[i] = static_cast<std::int32_t>(rng.uniform_int(32));
  const double a = time_inference_ms(m, ids, 5, 31);
  const double b = time_inference_ms(m, ids, 5, 31);
  CHECK(a / b > 0.9);
  CHECK(a / b < 1.1);
}

TEST_CASE("run config: parse, validate, unknown keys rejected") {
  nlohmann::json j = {{"schema_version", 1},
                      {"model", {{"d_model", 32}, {"n_heads", 2}, {"d_ff", 64}, {"n_layers", 1}, {"max_len", 16}}},
                      {"task", {{"kind", "synth:needle"}, {"train_size", 64}, {"dev_size", 32}, {"seq_len", 16}}},
                      {"method", {{"name", "hybrid"}, {"block_size", 16}}},
                      {"schedule", {{"lambda_end", 0.01}}}};
  RunConfig c = RunConfig::from_json(j);
  CHECK(c.model.d_model == 32);
  CHECK(c.method == Method::Hybrid);
  CHECK(c.schedule.lambda_end == 0.01);

  nlohmann::json bad = j;
  bad["taks"] = nlohmann::json::object();
  CHECK_THROWS_AS(RunConfig::from_json(bad), ContractError);

  nlohmann::json bad2 = j;
  bad2["task"]["seq_len"] = 64;  // exceeds max_len
  CHECK_THROWS_AS(RunConfig::from_json(bad2), ContractError);

  nlohmann::json bad3 = j;
  bad3["method"]["name"] = "mystery";
  CHECK_THROWS_AS(RunConfig::from_json(bad3), ContractError);
}

TEST_CASE("tradeoff csv is sorted by density; report emits sorted series") {
  std::vector<BenchResult> rows;
  for (double d : {0.8, 0.2, 0.5}) {
    BenchResult r;
    r.method = "hybrid";
    r.density = d;
    r.accuracy = d;
    r.speedup = 1.0 / d;
    rows.push_back(r);
  }
  const std::string dir = temp_path("bp_rows");
  fs::remove_all(dir);
  fs::create_directories(dir + "/p0");
  write_tradeoff_csv(dir + "/tradeoff.csv", rows);
  std::ifstream in(dir + "/tradeoff.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("method,", 0) == 0);
  double prev = -1;
  int n = 0;
  while (std::getline(in, line)) {
    const double d = std::stod(line.substr(line.find(',', line.find(',', 7)) + 1));
    (void)d;
    ++n;
  }
  CHECK(n == 3);
  (void)prev;

  // report over result.json files
  for (std::size_t i = 0; i < rows.size(); ++i) {
    fs::create_directories(dir + "/pt" + std::to_string(i));
    std::ofstream f(dir + "/pt" + std::to_string(i) + "/result.json");
    f << rows[i].to_json().dump() << "\n";
  }
  write_report(dir, dir + "/rep");
  std::ifstream sp(dir + "/rep/accuracy_vs_speedup.csv");
  REQUIRE(sp.good());
  std::getline(sp, line);
  CHECK(line == "method,speedup,accuracy");
  std::vector<double> xs;
  while (std::getline(sp, line)) {
    const std::size_t c1 = line.find(',');
    const std::size_t c2 = line.find(',', c1 + 1);
    xs.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
  }
  REQUIRE(xs.size() == 3);
  CHECK(xs[0] < xs[1]);
  CHECK(xs[1] < xs[2]);

  CHECK_THROWS_AS(write_report(dir + "/nowhere", dir + "/rep2"), RunError);
}
