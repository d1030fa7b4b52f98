#pragma once

// The four reference parameter-efficient methods, each written as hooks of
// the form h_out = f(h_in) + Δh:
//   Prompt   h_out = f([W_prompt; X])             (rows prepended to the input)
//   BitFit   Δh = W_b                             at every bias site
//   LoRA     Δh = α · h_in W_down W_up            at the target projections
//   Adapter  Δh = σ(f(h_in) W_down) W_up          after attention and after FFN

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "petlab/checkpoint.hpp"
#include "petlab/ops.hpp"
#include "petlab/transformer.hpp"
#include "petlab/tuning.hpp"

namespace petlab {

enum class PetKind { Prompt, BitFit, LoRA, Adapter };

PetKind parse_pet_kind(std::string_view name);
std::string_view pet_kind_name(PetKind kind);

inline constexpr std::size_t kDefaultPromptLen = 100;
inline constexpr std::size_t kDefaultLoraRank = 8;
inline constexpr double kDefaultLoraAlpha = 16.0;
inline constexpr std::size_t kDefaultAdapterBottleneck = 24;
inline constexpr double kProjectionInitStd = 0.02;

struct PetConfig {
  PetKind kind = PetKind::LoRA;
  std::size_t prompt_len = kDefaultPromptLen;
  std::size_t lora_rank = kDefaultLoraRank;
  double lora_alpha = kDefaultLoraAlpha;
  std::size_t adapter_bottleneck = kDefaultAdapterBottleneck;
  Activation adapter_activation = Activation::Relu;
  bool adapter_bias = false;
  // Empty means the method's default sites.
  std::vector<std::string> target_sites;

  void validate() const;
};

Json pet_config_to_json(const PetConfig& cfg);
PetConfig pet_config_from_json(const Json& j);

// Default insertion sites per method for a model configuration.
std::vector<std::string> default_pet_sites(PetKind kind, const ModelConfig& cfg);

struct PetBinding {
  std::string site;                  // empty for the prompt prefix
  std::vector<std::size_t> weights;  // indices into PetModule::weights()
};

class PetModule final : public TuningModule {
 public:
  PetModule(PetConfig cfg, std::size_t d_model, std::vector<NamedTensor> weights, std::vector<PetBinding> bindings);

  PetKind kind() const { return cfg_.kind; }
  const PetConfig& config() const { return cfg_; }
  std::size_t d_model() const { return d_model_; }
  const std::vector<NamedTensor>& weights() const { return weights_; }
  const std::vector<PetBinding>& bindings() const { return bindings_; }
  Tensor weight(std::string_view name) const;

  std::string method() const override { return std::string(pet_kind_name(cfg_.kind)); }
  std::vector<NamedTensor> trainable_tensors() const override { return weights_; }
  std::size_t trainable_count() const override;
  DeltaHooks hooks() const override;

  // Replaces weight values by name (shapes must match).
  void load_values(const std::vector<NamedTensor>& values);

 private:
  PetConfig cfg_;
  std::size_t d_model_;
  std::vector<NamedTensor> weights_;
  std::vector<PetBinding> bindings_;
};

// `input_len` is the length of sequences the module will see; prompt rows
// plus input must fit in max_seq_len.
PetModule attach_prompt(const Backbone& model, const PetConfig& cfg, std::uint64_t seed, std::size_t input_len);
PetModule attach_bitfit(const Backbone& model, const PetConfig& cfg = {PetKind::BitFit});
PetModule attach_lora(const Backbone& model, const PetConfig& cfg, std::uint64_t seed);
PetModule attach_adapter(const Backbone& model, const PetConfig& cfg, std::uint64_t seed);
// Dispatches on cfg.kind.
PetModule attach_pet(const Backbone& model, const PetConfig& cfg, std::uint64_t seed, std::size_t input_len);

// Closed-form trainable count for a method on a configuration.
std::size_t pet_parameter_count(const PetConfig& cfg, const ModelConfig& model);

// Backbone parameters with BitFit bias offsets folded in.
std::vector<NamedTensor> merge_bitfit(const Backbone& model, const PetModule& bitfit);

// Delta kernels shared with the masked variants.
Tensor row_offset_delta(const Tensor& offset, const Tensor& f_out);
Tensor lowrank_delta(const Tensor& h_in, const Tensor& down, const Tensor& up, double alpha);
Tensor bottleneck_delta(const Tensor& f_out, const Tensor& down, const Tensor& up, Activation act,
                        const Tensor* down_bias = nullptr, const Tensor* up_bias = nullptr);

Json pet_module_to_json(const PetModule& module);
PetModule pet_module_from_json(const Json& doc);
void save_pet_module(const PetModule& module, const std::filesystem::path& path);
PetModule load_pet_module(const std::filesystem::path& path);

}  // namespace petlab
