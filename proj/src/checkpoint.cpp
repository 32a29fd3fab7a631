#include "sinkattn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "sinkattn/config.hpp"

namespace sinkattn {

namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;

void write_u64_le(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64_le(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = is.get();
    if (c == EOF) throw IoError("checkpoint: truncated header length");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

void write_f32_le(std::ostream& os, float f) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::string section;
};

std::string section_of(const std::string& name) {
  if (name.rfind("opt.", 0) == 0) return "optimizer";
  if (name.find(".lora.") != std::string::npos) return "lora";
  return "base";
}

}  // namespace

void save_checkpoint(const std::string& path, const DecoderModel& model, const AdamState* opt) {
  std::vector<std::pair<std::string, Tensor>> arrays = model.named_parameters();
  if (opt) {
    for (const auto& [name, t] : model.named_parameters()) {
      auto it = opt->slots.find(name);
      if (it == opt->slots.end()) continue;
      arrays.emplace_back("opt.m." + name,
                          Tensor::from_data({it->second.m.size()}, it->second.m));
      arrays.emplace_back("opt.v." + name,
                          Tensor::from_data({it->second.v.size()}, it->second.v));
    }
  }

  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : arrays) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["section"] = section_of(name);
    manifest.push_back(entry);
    offset += t.numel() * 4;
  }

  json header;
  header["format_version"] = kFormatVersion;
  header["config"] = model_config_to_json(model.config);
  header["manifest"] = manifest;
  if (has_lora(model)) {
    const LoraAdapter* any = nullptr;
    std::string targets;
    const LayerWeights& l0 = model.layers.front();
    for (auto [c, lin] : {std::pair{'q', &l0.wq}, {'k', &l0.wk}, {'v', &l0.wv}, {'o', &l0.wo}}) {
      if (lin->adapter) {
        targets.push_back(c);
        any = &*lin->adapter;
      }
    }
    header["lora"] = {{"rank", any->rank},
                      {"alpha", any->alpha},
                      {"targets", targets},
                      {"train_embeddings", model.embedding.requires_grad()},
                      {"train_norms", model.final_norm.requires_grad()}};
  }
  if (opt) header["optimizer_step"] = opt->step;

  const std::string header_str = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  write_u64_le(os, header_str.size());
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : arrays) {
    for (double v : t.vec()) write_f32_le(os, static_cast<float>(v));
  }
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const std::optional<ModelConfig>& expected_config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  const std::uint64_t header_len = read_u64_le(is);
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw IoError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: bad header JSON: ") + e.what());
  }
  if (header.value("format_version", -1) != kFormatVersion) {
    throw ConfigError("checkpoint: unsupported format version");
  }
  const ModelConfig config = model_config_from_json(header.at("config"));
  if (expected_config && !(config == *expected_config)) {
    throw ConfigError("checkpoint: stored model config does not match the requested config");
  }

  std::vector<unsigned char> payload{std::istreambuf_iterator<char>(is),
                                     std::istreambuf_iterator<char>()};

  LoadedCheckpoint out;
  out.model = init_model(config);
  if (header.contains("lora")) {
    const json& lj = header.at("lora");
    TrainabilityPolicy policy;
    policy.embeddings = lj.value("train_embeddings", true);
    policy.norms = lj.value("train_norms", true);
    attach_lora(out.model, lj.at("targets").get<std::string>(), lj.at("rank").get<std::size_t>(),
                lj.at("alpha").get<double>(), policy, 0);
  }

  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [name, t] : out.model.named_parameters()) by_name.emplace(name, t);

  out.has_optimizer = header.contains("optimizer_step");
  if (out.has_optimizer) out.opt.step = header.at("optimizer_step").get<std::size_t>();

  for (const json& entry : header.at("manifest")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t count = shape_numel(shape);
    if (offset + count * 4 > payload.size()) {
      throw IoError("checkpoint: payload too short for '" + name + "'");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      values[i] = static_cast<double>(read_f32_le(payload.data() + offset + i * 4));
    }
    if (name.rfind("opt.m.", 0) == 0) {
      out.opt.slots[name.substr(6)].m = std::move(values);
    } else if (name.rfind("opt.v.", 0) == 0) {
      out.opt.slots[name.substr(6)].v = std::move(values);
    } else {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("checkpoint: unknown parameter '" + name + "'");
      if (it->second.shape() != shape) {
        throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
      }
      std::copy(values.begin(), values.end(), it->second.data());
    }
  }
  return out;
}

}  // namespace sinkattn
