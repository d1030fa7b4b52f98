#include "petlab/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "petlab/errors.hpp"
#include "petlab/transformer.hpp"

namespace petlab {

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t state) {
  for (std::byte b : bytes) {
    state ^= static_cast<std::uint64_t>(b);
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t state) {
  return fnv1a64(std::as_bytes(std::span(text.data(), text.size())), state);
}

std::uint64_t hash_tensors(const std::vector<NamedTensor>& tensors) {
  std::uint64_t h = fnv1a64(std::string_view{});
  for (const auto& t : tensors) {
    h = fnv1a64(t.name, h);
    for (auto d : t.tensor.shape()) {
      const std::uint64_t d64 = d;
      h = fnv1a64(std::as_bytes(std::span(&d64, 1)), h);
    }
    h = fnv1a64(std::as_bytes(t.tensor.data()), h);
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

Json model_config_to_json(const ModelConfig& cfg) {
  Json j;
  j["num_blocks"] = cfg.num_blocks;
  j["d_model"] = cfg.d_model;
  j["num_heads"] = cfg.num_heads;
  j["d_ff"] = cfg.d_ff;
  j["vocab_size"] = cfg.vocab_size;
  j["max_seq_len"] = cfg.max_seq_len;
  j["num_classes"] = cfg.num_classes;
  j["ffn_activation"] = std::string(activation_name(cfg.ffn_activation));
  return j;
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig cfg;
  try {
    cfg.num_blocks = j.value("num_blocks", cfg.num_blocks);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.num_heads = j.value("num_heads", cfg.num_heads);
    cfg.d_ff = j.value("d_ff", cfg.d_ff);
    cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
    cfg.max_seq_len = j.value("max_seq_len", cfg.max_seq_len);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.ffn_activation = parse_activation(j.value("ffn_activation", std::string("gelu")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

Json tensor_to_json(const std::string& name, const Tensor& t) {
  Json j;
  j["name"] = name;
  j["shape"] = t.shape();
  j["data"] = t.values();
  return j;
}

NamedTensor tensor_from_json(const Json& j) {
  try {
    return {j.at("name").get<std::string>(),
            Tensor::from(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>())};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed tensor record: ") + e.what());
  }
}

Json tensors_to_json(const std::vector<NamedTensor>& tensors) {
  Json arr = Json::array();
  for (const auto& t : tensors) arr.push_back(tensor_to_json(t.name, t.tensor));
  return arr;
}

std::vector<NamedTensor> tensors_from_json(const Json& j) {
  std::vector<NamedTensor> out;
  for (const auto& item : j) out.push_back(tensor_from_json(item));
  return out;
}

std::string pack_mask_bits(const Tensor& mask) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::vector<unsigned char> bytes((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.at(i) != 0.0) bytes[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
  }
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char b : bytes) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xf]);
  }
  return out;
}

Tensor unpack_mask_bits(const std::string& hex, const Shape& shape) {
  const std::size_t n = shape_size(shape);
  if (hex.size() != 2 * ((n + 7) / 8)) throw ConfigError("mask bit string has wrong length for " + shape_str(shape));
  auto nibble = [](char c) -> unsigned {
    if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
    throw ConfigError(std::string("invalid hex digit in mask: ") + c);
  };
  std::vector<double> values(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned byte = (nibble(hex[2 * (i / 8)]) << 4) | nibble(hex[2 * (i / 8) + 1]);
    values[i] = (byte >> (i % 8)) & 1u ? 1.0 : 0.0;
  }
  return Tensor::from(shape, std::move(values));
}

Json make_checkpoint(std::string_view kind, Json body) {
  Json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  doc["kind"] = kind;
  for (auto& [k, v] : body.items()) doc[k] = std::move(v);
  return doc;
}

Json open_checkpoint(const Json& doc, std::string_view kind) {
  if (!doc.is_object() || doc.value("format", std::string()) != kCheckpointFormat) {
    throw ConfigError("not a petlab checkpoint");
  }
  if (doc.value("version", 0) != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(doc.value("version", 0)));
  }
  if (doc.value("kind", std::string()) != kind) {
    throw ConfigError("checkpoint kind '" + doc.value("kind", std::string()) + "', expected '" + std::string(kind) +
                      "'");
  }
  return doc;
}

void write_json_file(const std::filesystem::path& path, const Json& doc) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << doc.dump() << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

Json backbone_to_json(const Backbone& model) {
  Json body;
  body["config"] = model_config_to_json(model.config());
  body["tensors"] = tensors_to_json(model.parameters());
  return make_checkpoint("backbone", std::move(body));
}

Backbone backbone_from_json(const Json& doc) {
  const Json& d = open_checkpoint(doc, "backbone");
  return Backbone(model_config_from_json(d.at("config")), tensors_from_json(d.at("tensors")));
}

void save_backbone(const Backbone& model, const std::filesystem::path& path) {
  write_json_file(path, backbone_to_json(model));
}

Backbone load_backbone(const std::filesystem::path& path) { return backbone_from_json(read_json_file(path)); }

}  // namespace petlab
