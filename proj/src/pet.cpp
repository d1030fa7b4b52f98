#include "petlab/pet.hpp"

#include <map>

#include "petlab/errors.hpp"

namespace petlab {

// ---------------------------------------------------------------- tuning

void freeze_backbone(Backbone& model) { model.set_trainable(false); }

FullFineTune::FullFineTune(Backbone& model) : model_(&model) { model_->set_trainable(true); }

std::vector<NamedTensor> FullFineTune::trainable_tensors() const { return model_->parameters(); }

std::size_t FullFineTune::trainable_count() const { return model_->parameter_count(); }

std::size_t count_trainable(const TuningModule& module) {
  std::size_t n = 0;
  for (const auto& t : module.trainable_tensors()) {
    if (t.tensor.requires_grad()) n += t.tensor.size();
  }
  return n;
}

// ---------------------------------------------------------------- config

PetKind parse_pet_kind(std::string_view name) {
  if (name == "prompt") return PetKind::Prompt;
  if (name == "bitfit") return PetKind::BitFit;
  if (name == "lora") return PetKind::LoRA;
  if (name == "adapter") return PetKind::Adapter;
  throw ConfigError("unknown PET method '" + std::string(name) + "'");
}

std::string_view pet_kind_name(PetKind kind) {
  switch (kind) {
    case PetKind::Prompt:
      return "prompt";
    case PetKind::BitFit:
      return "bitfit";
    case PetKind::LoRA:
      return "lora";
    case PetKind::Adapter:
      return "adapter";
  }
  return "?";
}

void PetConfig::validate() const {
  switch (kind) {
    case PetKind::Prompt:
      if (prompt_len < 1) throw ConfigError("prompt_len must be at least 1");
      break;
    case PetKind::LoRA:
      if (lora_rank < 1) throw ConfigError("lora_rank must be at least 1");
      break;
    case PetKind::Adapter:
      if (adapter_bottleneck < 1) throw ConfigError("adapter_bottleneck must be at least 1");
      break;
    case PetKind::BitFit:
      break;
  }
}

Json pet_config_to_json(const PetConfig& cfg) {
  Json j;
  j["kind"] = pet_kind_name(cfg.kind);
  j["prompt_len"] = cfg.prompt_len;
  j["lora_rank"] = cfg.lora_rank;
  j["lora_alpha"] = cfg.lora_alpha;
  j["adapter_bottleneck"] = cfg.adapter_bottleneck;
  j["adapter_activation"] = activation_name(cfg.adapter_activation);
  j["adapter_bias"] = cfg.adapter_bias;
  j["target_sites"] = cfg.target_sites;
  return j;
}

PetConfig pet_config_from_json(const Json& j) {
  PetConfig cfg;
  try {
    cfg.kind = parse_pet_kind(j.at("kind").get<std::string>());
    cfg.prompt_len = j.value("prompt_len", cfg.prompt_len);
    cfg.lora_rank = j.value("lora_rank", cfg.lora_rank);
    cfg.lora_alpha = j.value("lora_alpha", cfg.lora_alpha);
    cfg.adapter_bottleneck = j.value("adapter_bottleneck", cfg.adapter_bottleneck);
    cfg.adapter_activation = parse_activation(j.value("adapter_activation", std::string("relu")));
    cfg.adapter_bias = j.value("adapter_bias", cfg.adapter_bias);
    cfg.target_sites = j.value("target_sites", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("PET config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::vector<std::string> default_pet_sites(PetKind kind, const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    switch (kind) {
      case PetKind::Prompt:
        break;
      case PetKind::BitFit:
        for (SiteKind k : {SiteKind::Ln1, SiteKind::Query, SiteKind::Key, SiteKind::Value, SiteKind::AttnOut,
                           SiteKind::Ln2})
          out.push_back(site_name(b, k));
        break;
      case PetKind::LoRA:
        out.push_back(site_name(b, SiteKind::Query));
        out.push_back(site_name(b, SiteKind::Value));
        break;
      case PetKind::Adapter:
        out.push_back(site_name(b, SiteKind::AttnOut));
        out.push_back(site_name(b, SiteKind::FfnOut));
        break;
    }
  }
  return out;
}

namespace {

std::vector<std::string> resolve_sites(const PetConfig& cfg, const ModelConfig& model) {
  auto sites = cfg.target_sites.empty() ? default_pet_sites(cfg.kind, model) : cfg.target_sites;
  for (const auto& s : sites) {
    const SiteRef ref = parse_site(s);
    if (ref.block >= model.num_blocks) throw ConfigError("site '" + s + "' is outside the model");
    if (cfg.kind == PetKind::BitFit && !is_bias_site(ref.kind)) {
      throw ConfigError("site '" + s + "' carries no attention or layer-norm bias");
    }
  }
  return sites;
}

}  // namespace

std::size_t pet_parameter_count(const PetConfig& cfg, const ModelConfig& model) {
  const std::size_t d = model.d_model;
  const std::size_t sites = resolve_sites(cfg, model).size();
  switch (cfg.kind) {
    case PetKind::Prompt:
      return cfg.prompt_len * d;
    case PetKind::BitFit:
      return sites * d;
    case PetKind::LoRA:
      return sites * 2 * d * cfg.lora_rank;
    case PetKind::Adapter:
      return sites * (2 * d * cfg.adapter_bottleneck + (cfg.adapter_bias ? cfg.adapter_bottleneck + d : 0));
  }
  return 0;
}

// ---------------------------------------------------------------- deltas

Tensor row_offset_delta(const Tensor& offset, const Tensor& f_out) { return broadcast_rows(offset, f_out.rows()); }

Tensor lowrank_delta(const Tensor& h_in, const Tensor& down, const Tensor& up, double alpha) {
  return scale(matmul(matmul(h_in, down), up), alpha);
}

Tensor bottleneck_delta(const Tensor& f_out, const Tensor& down, const Tensor& up, Activation act,
                        const Tensor* down_bias, const Tensor* up_bias) {
  Tensor z = matmul(f_out, down);
  if (down_bias) z = add_bias(z, *down_bias);
  Tensor out = matmul(activate(z, act), up);
  if (up_bias) out = add_bias(out, *up_bias);
  return out;
}

// ---------------------------------------------------------------- module

PetModule::PetModule(PetConfig cfg, std::size_t d_model, std::vector<NamedTensor> weights,
                     std::vector<PetBinding> bindings)
    : cfg_(std::move(cfg)), d_model_(d_model), weights_(std::move(weights)), bindings_(std::move(bindings)) {
  cfg_.validate();
  for (auto& w : weights_) w.tensor.set_requires_grad(true);
  for (const auto& b : bindings_) {
    for (auto i : b.weights) {
      if (i >= weights_.size()) throw ConfigError("PET binding refers to a missing weight");
    }
  }
}

Tensor PetModule::weight(std::string_view name) const {
  for (const auto& w : weights_) {
    if (w.name == name) return w.tensor;
  }
  throw ConfigError("PET module has no weight '" + std::string(name) + "'");
}

std::size_t PetModule::trainable_count() const {
  std::size_t n = 0;
  for (const auto& w : weights_) n += w.tensor.size();
  return n;
}

DeltaHooks PetModule::hooks() const {
  DeltaHooks hooks;
  for (const auto& b : bindings_) {
    std::vector<Tensor> w;
    for (auto i : b.weights) w.push_back(weights_[i].tensor);
    switch (cfg_.kind) {
      case PetKind::Prompt: {
        Tensor prompt = w.at(0);
        hooks.bind_prefix([prompt] { return prompt; }, prompt.rows());
        break;
      }
      case PetKind::BitFit:
        hooks.bind(b.site, [wb = w.at(0)](const Tensor&, const Tensor& f) { return row_offset_delta(wb, f); });
        break;
      case PetKind::LoRA:
        hooks.bind(b.site, [down = w.at(0), up = w.at(1), alpha = cfg_.lora_alpha](const Tensor& h, const Tensor&) {
          return lowrank_delta(h, down, up, alpha);
        });
        break;
      case PetKind::Adapter:
        hooks.bind(b.site, [w, act = cfg_.adapter_activation](const Tensor&, const Tensor& f) {
          if (w.size() == 4) return bottleneck_delta(f, w[0], w[1], act, &w[2], &w[3]);
          return bottleneck_delta(f, w[0], w[1], act);
        });
        break;
    }
  }
  return hooks;
}

void PetModule::load_values(const std::vector<NamedTensor>& values) {
  for (const auto& v : values) {
    Tensor dst = weight(v.name);
    if (dst.shape() != v.tensor.shape()) {
      throw DimensionError("PET weight '" + v.name + "' has shape " + shape_str(dst.shape()) + ", got " +
                           shape_str(v.tensor.shape()));
    }
    std::copy(v.tensor.data().begin(), v.tensor.data().end(), dst.mutable_data().begin());
  }
}

// ---------------------------------------------------------------- attach

PetModule attach_prompt(const Backbone& model, const PetConfig& cfg, std::uint64_t seed, std::size_t input_len) {
  if (cfg.kind != PetKind::Prompt) throw ConfigError("attach_prompt needs a prompt config");
  cfg.validate();
  const auto& mc = model.config();
  if (cfg.prompt_len + input_len > mc.max_seq_len) {
    throw ConfigError("prompt_len " + std::to_string(cfg.prompt_len) + " plus input length " +
                      std::to_string(input_len) + " exceeds max_seq_len " + std::to_string(mc.max_seq_len));
  }
  Rng rng(seed);
  // Same scale as the token embeddings.
  Tensor prompt = Tensor::gaussian({cfg.prompt_len, mc.d_model}, 1.0, rng);
  return PetModule(cfg, mc.d_model, {{"prompt", prompt}}, {{"", {0}}});
}

PetModule attach_bitfit(const Backbone& model, const PetConfig& cfg) {
  if (cfg.kind != PetKind::BitFit) throw ConfigError("attach_bitfit needs a bitfit config");
  const auto& mc = model.config();
  std::vector<NamedTensor> weights;
  std::vector<PetBinding> bindings;
  for (const auto& site : resolve_sites(cfg, mc)) {
    bindings.push_back({site, {weights.size()}});
    weights.push_back({site + ".bias_delta", Tensor::zeros({mc.d_model})});
  }
  return PetModule(cfg, mc.d_model, std::move(weights), std::move(bindings));
}

PetModule attach_lora(const Backbone& model, const PetConfig& cfg, std::uint64_t seed) {
  if (cfg.kind != PetKind::LoRA) throw ConfigError("attach_lora needs a lora config");
  cfg.validate();
  const auto& mc = model.config();
  if (cfg.lora_rank > mc.d_model) {
    throw ConfigError("lora_rank " + std::to_string(cfg.lora_rank) + " exceeds d_model " + std::to_string(mc.d_model));
  }
  Rng rng(seed);
  std::vector<NamedTensor> weights;
  std::vector<PetBinding> bindings;
  for (const auto& site : resolve_sites(cfg, mc)) {
    bindings.push_back({site, {weights.size(), weights.size() + 1}});
    weights.push_back({site + ".lora_down", Tensor::gaussian({mc.d_model, cfg.lora_rank}, kProjectionInitStd, rng)});
    weights.push_back({site + ".lora_up", Tensor::zeros({cfg.lora_rank, mc.d_model})});
  }
  return PetModule(cfg, mc.d_model, std::move(weights), std::move(bindings));
}

PetModule attach_adapter(const Backbone& model, const PetConfig& cfg, std::uint64_t seed) {
  if (cfg.kind != PetKind::Adapter) throw ConfigError("attach_adapter needs an adapter config");
  cfg.validate();
  const auto& mc = model.config();
  const std::size_t r = cfg.adapter_bottleneck;
  Rng rng(seed);
  std::vector<NamedTensor> weights;
  std::vector<PetBinding> bindings;
  for (const auto& site : resolve_sites(cfg, mc)) {
    PetBinding b{site, {weights.size(), weights.size() + 1}};
    weights.push_back({site + ".adapter_down", Tensor::gaussian({mc.d_model, r}, kProjectionInitStd, rng)});
    weights.push_back({site + ".adapter_up", Tensor::zeros({r, mc.d_model})});
    if (cfg.adapter_bias) {
      b.weights.push_back(weights.size());
      weights.push_back({site + ".adapter_down_bias", Tensor::zeros({r})});
      b.weights.push_back(weights.size());
      weights.push_back({site + ".adapter_up_bias", Tensor::zeros({mc.d_model})});
    }
    bindings.push_back(std::move(b));
  }
  return PetModule(cfg, mc.d_model, std::move(weights), std::move(bindings));
}

PetModule attach_pet(const Backbone& model, const PetConfig& cfg, std::uint64_t seed, std::size_t input_len) {
  switch (cfg.kind) {
    case PetKind::Prompt:
      return attach_prompt(model, cfg, seed, input_len);
    case PetKind::BitFit:
      return attach_bitfit(model, cfg);
    case PetKind::LoRA:
      return attach_lora(model, cfg, seed);
    case PetKind::Adapter:
      return attach_adapter(model, cfg, seed);
  }
  throw ConfigError("unknown PET kind");
}

std::vector<NamedTensor> merge_bitfit(const Backbone& model, const PetModule& bitfit) {
  if (bitfit.kind() != PetKind::BitFit) throw UsageError("merge_bitfit needs a BitFit module");
  std::map<std::string, Tensor> offsets;
  for (const auto& b : bitfit.bindings()) {
    const SiteRef ref = parse_site(b.site);
    offsets[bias_parameter_name(ref.block, ref.kind)] = bitfit.weights()[b.weights.at(0)].tensor;
  }
  std::vector<NamedTensor> merged;
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor.detach();
    if (auto it = offsets.find(p.name); it != offsets.end()) {
      auto v = t.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += it->second.at(i);
    }
    merged.push_back({p.name, t});
  }
  return merged;
}

// ---------------------------------------------------------------- checkpoint

Json pet_module_to_json(const PetModule& module) {
  Json body;
  body["d_model"] = module.d_model();
  body["pet_config"] = pet_config_to_json(module.config());
  Json bindings = Json::array();
  for (const auto& b : module.bindings()) {
    Json jb;
    jb["site"] = b.site;
    Json names = Json::array();
    for (auto i : b.weights) names.push_back(module.weights()[i].name);
    jb["weights"] = names;
    bindings.push_back(jb);
  }
  body["bindings"] = bindings;
  body["tensors"] = tensors_to_json(module.weights());
  return make_checkpoint("pet", std::move(body));
}

PetModule pet_module_from_json(const Json& doc) {
  const Json& d = open_checkpoint(doc, "pet");
  PetConfig cfg = pet_config_from_json(d.at("pet_config"));
  auto weights = tensors_from_json(d.at("tensors"));
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < weights.size(); ++i) index[weights[i].name] = i;
  std::vector<PetBinding> bindings;
  for (const auto& jb : d.at("bindings")) {
    PetBinding b{jb.at("site").get<std::string>(), {}};
    for (const auto& name : jb.at("weights")) {
      auto it = index.find(name.get<std::string>());
      if (it == index.end()) throw ConfigError("PET checkpoint binding names a missing tensor");
      b.weights.push_back(it->second);
    }
    bindings.push_back(std::move(b));
  }
  return PetModule(cfg, d.value("d_model", std::size_t{0}), std::move(weights), std::move(bindings));
}

void save_pet_module(const PetModule& module, const std::filesystem::path& path) {
  write_json_file(path, pet_module_to_json(module));
}

PetModule load_pet_module(const std::filesystem::path& path) { return pet_module_from_json(read_json_file(path)); }

}  // namespace petlab
