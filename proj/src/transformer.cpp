#include "petlab/transformer.hpp"

#include <charconv>
#include <cmath>
#include <map>

#include "petlab/checkpoint.hpp"
#include "petlab/errors.hpp"

namespace petlab {

// ---------------------------------------------------------------- sites

namespace {

constexpr SiteKind kAllKinds[] = {SiteKind::Ln1,     SiteKind::Query, SiteKind::Key,   SiteKind::Value,
                                  SiteKind::AttnOut, SiteKind::Ln2,   SiteKind::FfnOut};

}  // namespace

std::string_view site_kind_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::Ln1:
      return "ln1";
    case SiteKind::Query:
      return "attn.q";
    case SiteKind::Key:
      return "attn.k";
    case SiteKind::Value:
      return "attn.v";
    case SiteKind::AttnOut:
      return "attn.o";
    case SiteKind::Ln2:
      return "ln2";
    case SiteKind::FfnOut:
      return "ffn.out";
  }
  return "?";
}

SiteKind parse_site_kind(std::string_view name) {
  for (SiteKind k : kAllKinds) {
    if (site_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown site kind '" + std::string(name) + "'");
}

std::string site_name(std::size_t block, SiteKind kind) {
  return "blocks." + std::to_string(block) + "." + std::string(site_kind_name(kind));
}

SiteRef parse_site(std::string_view name) {
  constexpr std::string_view prefix = "blocks.";
  if (name.substr(0, prefix.size()) != prefix) throw ConfigError("malformed site name '" + std::string(name) + "'");
  auto rest = name.substr(prefix.size());
  const auto dot = rest.find('.');
  if (dot == std::string_view::npos) throw ConfigError("malformed site name '" + std::string(name) + "'");
  SiteRef ref;
  auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + dot, ref.block);
  if (ec != std::errc() || ptr != rest.data() + dot) {
    throw ConfigError("malformed block index in site '" + std::string(name) + "'");
  }
  ref.kind = parse_site_kind(rest.substr(dot + 1));
  return ref;
}

std::vector<std::string> all_sites(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b)
    for (SiteKind k : kAllKinds) out.push_back(site_name(b, k));
  return out;
}

bool is_bias_site(SiteKind kind) { return kind != SiteKind::FfnOut; }

std::string bias_parameter_name(std::size_t block, SiteKind kind) {
  const std::string p = "blocks." + std::to_string(block) + ".";
  switch (kind) {
    case SiteKind::Ln1:
      return p + "ln1.bias";
    case SiteKind::Query:
      return p + "attn.bq";
    case SiteKind::Key:
      return p + "attn.bk";
    case SiteKind::Value:
      return p + "attn.bv";
    case SiteKind::AttnOut:
      return p + "attn.bo";
    case SiteKind::Ln2:
      return p + "ln2.bias";
    case SiteKind::FfnOut:
      return p + "ffn.b2";
  }
  return p;
}

void DeltaHooks::bind(const std::string& site, DeltaFn fn) {
  if (!fns_.emplace(site, std::move(fn)).second) throw ConfigError("site '" + site + "' is already bound");
}

void DeltaHooks::bind_prefix(PrefixFn fn, std::size_t rows) {
  if (prefix_) throw ConfigError("a prompt prefix is already bound");
  if (rows == 0) throw ConfigError("prompt prefix must have at least one row");
  prefix_ = std::move(fn);
  prefix_rows_ = rows;
}

void DeltaHooks::merge(const DeltaHooks& other) {
  for (const auto& [site, fn] : other.fns_) bind(site, fn);
  if (other.prefix_) bind_prefix(*other.prefix_, other.prefix_rows_);
}

const DeltaFn* DeltaHooks::find(const std::string& site) const {
  auto it = fns_.find(site);
  return it == fns_.end() ? nullptr : &it->second;
}

Tensor DeltaHooks::prefix() const {
  if (!prefix_) throw UsageError("no prompt prefix bound");
  return (*prefix_)();
}

std::vector<std::string> DeltaHooks::sites() const {
  std::vector<std::string> out;
  for (const auto& [site, fn] : fns_) out.push_back(site);
  return out;
}

void DeltaHooks::validate(const ModelConfig& cfg) const {
  for (const auto& [site, fn] : fns_) {
    const SiteRef ref = parse_site(site);
    if (ref.block >= cfg.num_blocks) {
      throw ConfigError("site '" + site + "' refers to block " + std::to_string(ref.block) + " of a " +
                        std::to_string(cfg.num_blocks) + "-block model");
    }
  }
}

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (num_blocks == 0 || d_model == 0 || num_heads == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % num_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (d_ff <= d_model) throw ConfigError("d_ff must exceed d_model");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = d_model;
  const std::size_t per_block = 4 * (d * d + d)                   // q, k, v, o
                                + (d * d_ff + d_ff) + (d_ff * d + d)  // ffn
                                + 4 * d;                            // two layer norms
  return vocab_size * d + max_seq_len * d + num_blocks * per_block + d * num_classes + num_classes;
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.num_blocks == b.num_blocks && a.d_model == b.d_model && a.num_heads == b.num_heads && a.d_ff == b.d_ff &&
         a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len && a.num_classes == b.num_classes &&
         a.ffn_activation == b.ffn_activation;
}

// ---------------------------------------------------------------- backbone

namespace {

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { Gaussian, Ones, SmallGaussian } init;
  double stddev;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  using I = ParamSpec::Init;
  const double d = static_cast<double>(c.d_model);
  const double inv_d = 1.0 / std::sqrt(d);
  const double inv_ff = 1.0 / std::sqrt(static_cast<double>(c.d_ff));
  constexpr double kBiasStd = 0.02;
  std::vector<ParamSpec> s;
  s.push_back({"embed.tokens", {c.vocab_size, c.d_model}, I::Gaussian, 1.0});
  s.push_back({"embed.positions", {c.max_seq_len, c.d_model}, I::Gaussian, 1.0});
  for (std::size_t b = 0; b < c.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    s.push_back({p + "ln1.gain", {c.d_model}, I::Ones, 0});
    s.push_back({p + "ln1.bias", {c.d_model}, I::SmallGaussian, kBiasStd});
    for (const char* m : {"q", "k", "v", "o"}) {
      s.push_back({p + "attn.w" + m, {c.d_model, c.d_model}, I::Gaussian, inv_d});
      s.push_back({p + "attn.b" + m, {c.d_model}, I::SmallGaussian, kBiasStd});
    }
    s.push_back({p + "ln2.gain", {c.d_model}, I::Ones, 0});
    s.push_back({p + "ln2.bias", {c.d_model}, I::SmallGaussian, kBiasStd});
    s.push_back({p + "ffn.w1", {c.d_model, c.d_ff}, I::Gaussian, inv_d});
    s.push_back({p + "ffn.b1", {c.d_ff}, I::SmallGaussian, kBiasStd});
    s.push_back({p + "ffn.w2", {c.d_ff, c.d_model}, I::Gaussian, inv_ff});
    s.push_back({p + "ffn.b2", {c.d_model}, I::SmallGaussian, kBiasStd});
  }
  s.push_back({"head.weight", {c.d_model, c.num_classes}, I::Gaussian, inv_d});
  s.push_back({"head.bias", {c.num_classes}, I::SmallGaussian, kBiasStd});
  return s;
}

}  // namespace

Backbone::Backbone(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  for (const auto& spec : param_specs(cfg_)) {
    Tensor t = spec.init == ParamSpec::Init::Ones ? Tensor::full(spec.shape, 1.0)
                                                  : Tensor::gaussian(spec.shape, spec.stddev, rng);
    params_.push_back({spec.name, t});
  }
  bind_fields();
}

Backbone::Backbone(const ModelConfig& cfg, const std::vector<NamedTensor>& params) : cfg_(cfg) {
  cfg_.validate();
  std::map<std::string, Tensor> by_name;
  for (const auto& p : params) by_name[p.name] = p.tensor;
  for (const auto& spec : param_specs(cfg_)) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end()) throw ConfigError("backbone parameter '" + spec.name + "' missing");
    if (it->second.shape() != spec.shape) {
      throw DimensionError("backbone parameter '" + spec.name + "' has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(spec.shape));
    }
    params_.push_back({spec.name, it->second});
  }
  if (by_name.size() != params_.size()) throw ConfigError("unexpected extra backbone parameters");
  bind_fields();
}

void Backbone::bind_fields() {
  std::map<std::string, Tensor> m;
  for (const auto& p : params_) m[p.name] = p.tensor;
  tokens_ = m.at("embed.tokens");
  positions_ = m.at("embed.positions");
  head_w_ = m.at("head.weight");
  head_b_ = m.at("head.bias");
  blocks_.clear();
  for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    BlockWeights w;
    w.ln1 = {m.at(p + "ln1.gain"), m.at(p + "ln1.bias")};
    w.attn = {m.at(p + "attn.wq"), m.at(p + "attn.bq"), m.at(p + "attn.wk"), m.at(p + "attn.bk"),
              m.at(p + "attn.wv"), m.at(p + "attn.bv"), m.at(p + "attn.wo"), m.at(p + "attn.bo")};
    w.ln2 = {m.at(p + "ln2.gain"), m.at(p + "ln2.bias")};
    w.ffn = {m.at(p + "ffn.w1"), m.at(p + "ffn.b1"), m.at(p + "ffn.w2"), m.at(p + "ffn.b2")};
    blocks_.push_back(std::move(w));
  }
}

Tensor Backbone::parameter(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ConfigError("no backbone parameter named '" + std::string(name) + "'");
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

const BlockWeights& Backbone::block(std::size_t b) const {
  if (b >= blocks_.size()) {
    throw IndexError("block " + std::to_string(b) + " out of range for " + std::to_string(blocks_.size()) + " blocks");
  }
  return blocks_[b];
}

void Backbone::set_trainable(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

bool Backbone::any_trainable() const {
  for (const auto& p : params_) {
    if (p.tensor.requires_grad()) return true;
  }
  return false;
}

Backbone Backbone::clone() const {
  std::vector<NamedTensor> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) copy.push_back({p.name, p.tensor.clone()});
  return Backbone(cfg_, copy);
}

std::uint64_t Backbone::hash() const { return hash_tensors(params_); }

Tensor Backbone::attention_head_forward(const Tensor& x, std::size_t b, std::size_t head) const {
  const auto& w = block(b).attn;
  if (head >= cfg_.num_heads) {
    throw IndexError("head " + std::to_string(head) + " out of range for " + std::to_string(cfg_.num_heads) +
                     " heads");
  }
  const std::size_t dh = cfg_.head_dim(), c0 = head * dh;
  auto project = [&](const Tensor& wm, const Tensor& bias) {
    Tensor bias_row = reshape(bias, {1, cfg_.d_model});
    return add_bias(matmul(x, slice_cols(wm, c0, dh)), slice_cols(bias_row, c0, dh));
  };
  const Tensor q = project(w.wq, w.bq);
  const Tensor k = project(w.wk, w.bk);
  const Tensor v = project(w.wv, w.bv);
  const Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  return matmul(softmax_rows(logits), v);
}

Tensor Backbone::mha_forward(const Tensor& x, std::size_t b) const {
  std::vector<Tensor> heads;
  for (std::size_t i = 0; i < cfg_.num_heads; ++i) heads.push_back(attention_head_forward(x, b, i));
  const auto& w = block(b).attn;
  return add_bias(matmul(concat_cols(heads), w.wo), w.bo);
}

Tensor Backbone::ffn_forward(const Tensor& h, std::size_t b) const {
  const auto& w = block(b).ffn;
  return add_bias(matmul(activate(add_bias(matmul(h, w.w1), w.b1), cfg_.ffn_activation), w.w2), w.b2);
}

Tensor Backbone::apply_site(std::size_t b, SiteKind kind, const Tensor& h_in, Tensor f_out, const DeltaHooks& hooks,
                            SiteTrace* trace) const {
  const std::string name = site_name(b, kind);
  const DeltaFn* fn = hooks.find(name);
  if (!fn) return f_out;
  Tensor delta = (*fn)(h_in, f_out);
  if (delta.shape() != f_out.shape()) {
    throw ConfigError("hook at '" + name + "' returned " + shape_str(delta.shape()) + " for hidden state " +
                      shape_str(f_out.shape()));
  }
  Tensor out = add(f_out, delta);
  if (trace) (*trace)[name] = {f_out, delta, out};
  return out;
}

Tensor Backbone::block_forward(const Tensor& h, std::size_t b, const DeltaHooks& hooks, std::size_t segments,
                               SiteTrace* trace) const {
  const auto& w = block(b);
  hooks.validate(cfg_);
  const Tensor a = apply_site(b, SiteKind::Ln1, h, layer_norm(h, w.ln1.gain, w.ln1.bias), hooks, trace);
  const Tensor q = apply_site(b, SiteKind::Query, a, add_bias(matmul(a, w.attn.wq), w.attn.bq), hooks, trace);
  const Tensor k = apply_site(b, SiteKind::Key, a, add_bias(matmul(a, w.attn.wk), w.attn.bk), hooks, trace);
  const Tensor v = apply_site(b, SiteKind::Value, a, add_bias(matmul(a, w.attn.wv), w.attn.bv), hooks, trace);
  const Tensor ctx = attention_core(q, k, v, segments, cfg_.num_heads);
  const Tensor o = apply_site(b, SiteKind::AttnOut, a, add_bias(matmul(ctx, w.attn.wo), w.attn.bo), hooks, trace);
  const Tensor h1 = add(h, o);
  const Tensor n2 = apply_site(b, SiteKind::Ln2, h1, layer_norm(h1, w.ln2.gain, w.ln2.bias), hooks, trace);
  const Tensor f = apply_site(b, SiteKind::FfnOut, n2, ffn_forward(n2, b), hooks, trace);
  return add(h1, f);
}

Tensor Backbone::embed(const std::vector<TokenSeq>& batch) const {
  if (batch.empty()) throw UsageError("forward: empty batch");
  const std::size_t n = batch.front().size();
  if (n == 0) throw InputError("forward: empty token sequence");
  if (n > cfg_.max_seq_len) {
    throw InputError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  std::vector<std::uint32_t> ids, pos;
  ids.reserve(batch.size() * n);
  pos.reserve(batch.size() * n);
  for (const auto& seq : batch) {
    if (seq.size() != n) throw InputError("forward: all sequences in a batch must have equal length");
    for (std::size_t i = 0; i < n; ++i) {
      if (seq[i] >= cfg_.vocab_size) {
        throw InputError("token id " + std::to_string(seq[i]) + " out of vocabulary of size " +
                         std::to_string(cfg_.vocab_size));
      }
      ids.push_back(seq[i]);
      pos.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return add(embedding(tokens_, ids), embedding(positions_, pos));
}

Tensor Backbone::forward(const std::vector<TokenSeq>& batch, const DeltaHooks& hooks, SiteTrace* trace) const {
  hooks.validate(cfg_);
  Tensor x = embed(batch);
  const std::size_t segments = batch.size();
  std::size_t skip = 0;
  if (hooks.has_prefix()) {
    skip = hooks.prefix_rows();
    if (skip + batch.front().size() > cfg_.max_seq_len) {
      throw ConfigError("prompt length " + std::to_string(skip) + " plus input length " +
                        std::to_string(batch.front().size()) + " exceeds max_seq_len " +
                        std::to_string(cfg_.max_seq_len));
    }
    Tensor prefix = hooks.prefix();
    if (prefix.shape() != Shape{skip, cfg_.d_model}) {
      throw ConfigError("prompt prefix has shape " + shape_str(prefix.shape()));
    }
    x = prepend_rows(x, prefix, segments);
  }
  for (std::size_t b = 0; b < cfg_.num_blocks; ++b) x = block_forward(x, b, hooks, segments, trace);
  const Tensor pooled = segment_mean(x, segments, skip);
  return add_bias(matmul(pooled, head_w_), head_b_);
}

std::vector<double> Backbone::model_forward(const TokenSeq& tokens, const DeltaHooks& hooks) const {
  const Tensor logits = forward({tokens}, hooks);
  return logits.values();
}

}  // namespace petlab
