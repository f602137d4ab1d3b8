#include "blockprune/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace blockprune {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr char kMagic[4] = {'B', 'M', 'P', '1'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeI8 = 1;
constexpr std::int64_t kAlign = 64;

void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct RawEntry {
  std::string name;
  std::uint8_t dtype;
  Shape shape;
  const void* data;
  std::int64_t bytes;
};

std::int64_t index_size(const std::vector<RawEntry>& entries) {
  std::int64_t n = 4 + 4 + 4;
  for (const RawEntry& e : entries)
    n += 2 + static_cast<std::int64_t>(e.name.size()) + 1 + 8 * static_cast<std::int64_t>(e.shape.size()) + 1 + 8;
  return n;
}

void write_tensor_file(const std::string& path, const std::vector<RawEntry>& entries) {
  std::string header;
  header.append(kMagic, 4);
  put_u32(header, kFormatVersion);
  put_u32(header, static_cast<std::uint32_t>(entries.size()));

  std::int64_t cursor = index_size(entries);
  std::vector<std::int64_t> offsets;
  for (const RawEntry& e : entries) {
    cursor = (cursor + kAlign - 1) / kAlign * kAlign;
    offsets.push_back(cursor);
    cursor += e.bytes;
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const RawEntry& e = entries[i];
    put_u16(header, static_cast<std::uint16_t>(e.name.size()));
    header.append(e.name);
    header.push_back(static_cast<char>(e.shape.size()));
    for (std::int64_t d : e.shape) put_u64(header, static_cast<std::uint64_t>(d));
    header.push_back(static_cast<char>(e.dtype));
    put_u64(header, static_cast<std::uint64_t>(offsets[i]));
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw RunError("cannot write " + path);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::int64_t pos = static_cast<std::int64_t>(header.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      while (pos < offsets[i]) {
        out.put(0);
        ++pos;
      }
      out.write(static_cast<const char*>(entries[i].data), entries[i].bytes);
      pos += entries[i].bytes;
    }
    if (!out) throw RunError("write failed: " + path);
  }
  fs::rename(tmp, path);
}

struct LoadedEntry {
  std::uint8_t dtype;
  Shape shape;
  std::vector<char> payload;
};

std::map<std::string, LoadedEntry> read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw RunError("bad tensor file magic in " + path);
  auto u16 = [&](std::size_t o) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[o]) |
                                      (static_cast<unsigned char>(bytes[o + 1]) << 8));
  };
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
  if (u32(4) != kFormatVersion) throw RunError("unsupported tensor format version in " + path);
  const std::uint32_t count = u32(8);
  std::map<std::string, LoadedEntry> out;
  std::size_t o = 12;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = u16(o);
    o += 2;
    std::string name = bytes.substr(o, name_len);
    o += name_len;
    const std::uint8_t ndim = static_cast<std::uint8_t>(bytes[o++]);
    Shape shape;
    std::int64_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<std::int64_t>(u64(o)));
      numel *= shape.back();
      o += 8;
    }
    const std::uint8_t dtype = static_cast<std::uint8_t>(bytes[o++]);
    const std::uint64_t offset = u64(o);
    o += 8;
    const std::int64_t width = dtype == kDtypeF32 ? 4 : 1;
    if (offset + static_cast<std::uint64_t>(numel * width) > bytes.size())
      throw RunError("tensor payload out of range in " + path);
    LoadedEntry e;
    e.dtype = dtype;
    e.shape = std::move(shape);
    e.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                     bytes.begin() + static_cast<std::ptrdiff_t>(offset + static_cast<std::uint64_t>(numel * width)));
    out.emplace(std::move(name), std::move(e));
  }
  return out;
}

Tensor<float> to_f32(const LoadedEntry& e, const std::string& name) {
  if (e.dtype != kDtypeF32) throw RunError("tensor " + name + " is not float32");
  Tensor<float> t(e.shape);
  std::memcpy(t.data(), e.payload.data(), e.payload.size());
  return t;
}

Tensor<std::int8_t> to_i8(const LoadedEntry& e, const std::string& name) {
  if (e.dtype != kDtypeI8) throw RunError("tensor " + name + " is not int8");
  Tensor<std::int8_t> t(e.shape);
  std::memcpy(t.data(), e.payload.data(), e.payload.size());
  return t;
}

json model_config_json(const ModelConfig& cfg) {
  return json{{"d_model", cfg.d_model},       {"n_heads", cfg.n_heads},
              {"d_ff", cfg.d_ff},             {"n_layers", cfg.n_layers},
              {"vocab_size", cfg.vocab_size}, {"max_len", cfg.max_len},
              {"n_classes", cfg.n_classes},   {"activation", cfg.activation == Activation::Gelu ? "gelu" : "relu"},
              {"dropout", cfg.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.d_model = j.at("d_model").get<std::int64_t>();
  cfg.n_heads = j.at("n_heads").get<std::int64_t>();
  cfg.d_ff = j.at("d_ff").get<std::int64_t>();
  cfg.n_layers = j.at("n_layers").get<std::int64_t>();
  cfg.vocab_size = j.at("vocab_size").get<std::int64_t>();
  cfg.max_len = j.at("max_len").get<std::int64_t>();
  cfg.n_classes = j.at("n_classes").get<std::int64_t>();
  cfg.activation = j.value("activation", "gelu") == std::string("relu") ? Activation::Relu : Activation::Gelu;
  cfg.dropout = j.value("dropout", 0.1f);
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Model& model, const PruneState* prune,
                     const QuantModel* quant, const json& extra) {
  fs::create_directories(dir);
  std::vector<RawEntry> entries;
  std::vector<Tensor<float>> mask_storage;  // keeps float->int8 conversions alive
  std::vector<Tensor<std::int8_t>> mask_i8;

  auto add_f32 = [&](const std::string& name, const Tensor<float>& t) {
    entries.push_back({name, kDtypeF32, t.shape(), t.data(), t.numel() * 4});
  };
  auto add_i8 = [&](const std::string& name, const Tensor<std::int8_t>& t) {
    entries.push_back({name, kDtypeI8, t.shape(), t.data(), t.numel()});
  };

  const bool quantized = quant != nullptr;
  auto& params_model = const_cast<Model&>(quantized ? quant->shell : model);
  for (const auto& p : params_model.params()) {
    const bool is_family_weight = p.name.starts_with("layer") && p.name.ends_with(".w");
    if (quantized && is_family_weight) continue;  // stored as q + scales below
    add_f32(p.name, *p.tensor);
  }
  if (quantized) {
    for (std::size_t li = 0; li < quant->weights.size(); ++li)
      for (Family f : kFamilies) {
        const auto& qt = quant->weights[li][static_cast<std::size_t>(static_cast<int>(f))];
        const std::string base = "layer" + std::to_string(li) + "." + family_name(f) + ".w";
        add_i8(base + ".q", qt.q);
        add_f32(base + ".scales", qt.scales);
      }
  }

  json cfg_json;
  cfg_json["schema_version"] = 1;
  cfg_json["format"] = "bmp-checkpoint";
  cfg_json["model"] = model_config_json(model.cfg);
  json heads = json::array(), dffs = json::array();
  for (const EncoderLayer& l : model.layers) {
    heads.push_back(l.n_heads);
    dffs.push_back(l.d_ff());
  }
  cfg_json["heads_per_layer"] = heads;
  cfg_json["d_ff_per_layer"] = dffs;
  cfg_json["quantized"] = quantized;
  if (!extra.is_null() && !extra.empty()) cfg_json["extra"] = extra;

  if (prune) {
    cfg_json["prune"] = json{{"method", method_name(prune->method)},
                             {"att_block_size", prune->att_pattern.block_size},
                             {"tied_heads", prune->att_pattern.tied_heads},
                             {"tau", prune->tau},
                             {"s0", prune->s0},
                             {"frozen", prune->frozen}};
    for (std::size_t gi = 0; gi < prune->groups.size(); ++gi)
      add_f32("score" + std::to_string(gi), prune->groups[gi].scores);
    MaskSet masks = prune->masks(model);
    for (std::size_t li = 0; li < model.layers.size(); ++li)
      for (Family f : kFamilies) {
        const Tensor<float>* m = masks.find(static_cast<std::int64_t>(li), f);
        if (!m) continue;
        mask_i8.push_back(m->cast<std::int8_t>());
        entries.push_back({"layer" + std::to_string(li) + "." + family_name(f) + ".mask", kDtypeI8,
                           mask_i8.back().shape(), mask_i8.back().data(), mask_i8.back().numel()});
      }
  }

  write_tensor_file(dir + "/tensors.bin", entries);
  const std::string cfg_tmp = dir + "/config.json.tmp";
  {
    std::ofstream out(cfg_tmp);
    if (!out) throw RunError("cannot write config.json in " + dir);
    out << cfg_json.dump(2) << "\n";
  }
  fs::rename(cfg_tmp, dir + "/config.json");
  (void)mask_storage;
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream cin(dir + "/config.json");
  if (!cin) throw RunError("cannot open checkpoint config: " + dir);
  json cfg_json = json::parse(cin);
  if (cfg_json.value("schema_version", 0) != 1) throw RunError("unsupported checkpoint schema in " + dir);

  auto entries = read_tensor_file(dir + "/tensors.bin");
  auto fetch = [&](const std::string& name) -> const LoadedEntry& {
    auto it = entries.find(name);
    if (it == entries.end()) throw RunError("checkpoint missing tensor '" + name + "' in " + dir);
    return it->second;
  };

  Checkpoint ck;
  ck.config = cfg_json;
  ck.model.cfg = model_config_from_json(cfg_json.at("model"));
  const auto heads = cfg_json.at("heads_per_layer").get<std::vector<std::int64_t>>();
  ck.model.layers.resize(static_cast<std::size_t>(ck.model.cfg.n_layers));
  for (std::size_t li = 0; li < ck.model.layers.size(); ++li) {
    ck.model.layers[li].n_heads = heads[li];
    ck.model.layers[li].head_dim = ck.model.cfg.head_dim();
  }

  const bool quantized = cfg_json.value("quantized", false);
  for (const auto& p : ck.model.params()) {
    const bool is_family_weight = p.name.starts_with("layer") && p.name.ends_with(".w");
    if (quantized && is_family_weight) continue;
    *p.tensor = to_f32(fetch(p.name), p.name);
  }

  if (quantized) {
    QuantModel qm;
    qm.weights.resize(ck.model.layers.size());
    for (std::size_t li = 0; li < ck.model.layers.size(); ++li)
      for (Family f : kFamilies) {
        const std::string base = "layer" + std::to_string(li) + "." + family_name(f) + ".w";
        QuantTensor qt;
        qt.q = to_i8(fetch(base + ".q"), base + ".q");
        qt.scales = to_f32(fetch(base + ".scales"), base + ".scales");
        ck.model.layers[li].lin(f).w = Tensor<float>::zeros(qt.q.shape());
        qm.weights[li][static_cast<std::size_t>(static_cast<int>(f))] = std::move(qt);
      }
    qm.shell = ck.model;
    ck.quant = std::move(qm);
  }

  if (cfg_json.contains("prune")) {
    const json& pj = cfg_json.at("prune");
    PruneState ps = attach_method(ck.model, parse_method(pj.at("method").get<std::string>()),
                                  pj.value("att_block_size", std::int64_t{32}), pj.value("tied_heads", true));
    ps.tau = pj.value("tau", 0.0f);
    ps.s0 = pj.value("s0", 0.01f);
    for (std::size_t gi = 0; gi < ps.groups.size(); ++gi) {
      const std::string name = "score" + std::to_string(gi);
      ps.groups[gi].scores = to_f32(fetch(name), name).reshaped(ps.groups[gi].scores.shape());
    }
    if (pj.value("frozen", false)) {
      ps.frozen = true;
      ps.frozen_masks = MaskSet::sized(ck.model.cfg.n_layers);
      for (std::size_t li = 0; li < ck.model.layers.size(); ++li)
        for (Family f : kFamilies) {
          const std::string name = "layer" + std::to_string(li) + "." + family_name(f) + ".mask";
          auto it = entries.find(name);
          if (it != entries.end())
            ps.frozen_masks.at(static_cast<std::int64_t>(li), f) = to_i8(it->second, name).cast<float>();
        }
    }
    ck.prune = std::move(ps);
  }
  return ck;
}

}  // namespace blockprune
