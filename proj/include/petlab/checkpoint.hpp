#pragma once

// Checkpoint container: a JSON document with a format tag, a version, the
// producing configuration and an ordered list of named tensors. Fields are
// written in a fixed order and doubles use round-trip precision, so equal
// contents give byte-identical files.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

class Backbone;
struct ModelConfig;

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kCheckpointFormat = "petlab-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t state = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t state = 0xcbf29ce484222325ULL);
// Hash over names, shapes and raw value bytes, in order.
std::uint64_t hash_tensors(const std::vector<NamedTensor>& tensors);
std::string hex64(std::uint64_t value);

Json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const Json& j);

Json tensor_to_json(const std::string& name, const Tensor& t);
NamedTensor tensor_from_json(const Json& j);
Json tensors_to_json(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> tensors_from_json(const Json& j);

// Row-major bits, least significant bit first within each byte, hex encoded.
std::string pack_mask_bits(const Tensor& mask);
Tensor unpack_mask_bits(const std::string& hex, const Shape& shape);

// Wraps a payload with the format tag and version.
Json make_checkpoint(std::string_view kind, Json body);
// Validates the tag, version and kind; returns the document.
Json open_checkpoint(const Json& doc, std::string_view kind);

void write_json_file(const std::filesystem::path& path, const Json& doc);
Json read_json_file(const std::filesystem::path& path);

Json backbone_to_json(const Backbone& model);
Backbone backbone_from_json(const Json& doc);
void save_backbone(const Backbone& model, const std::filesystem::path& path);
Backbone load_backbone(const std::filesystem::path& path);

}  // namespace petlab
