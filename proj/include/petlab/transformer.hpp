#pragma once

// Encoder-only transformer used as the frozen backbone. Blocks are pre-norm:
//   a  = LN1(h)
//   h' = h + MHA(a)
//   h_out = h' + FFN(LN2(h'))
// with MHA heads softmax((a W_q^i)(a W_k^i)ᵀ / sqrt(d/h)) (a W_v^i),
// concatenated and projected by W_o, and FFN(x) = σ(x W_1 + b_1) W_2 + b_2.
// Sequences are mean-pooled (excluding prefix rows) into a linear classifier.

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "petlab/hooks.hpp"
#include "petlab/ops.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

struct ModelConfig {
  std::size_t num_blocks = 2;
  std::size_t d_model = 32;
  std::size_t num_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 640;
  std::size_t max_seq_len = 32;
  std::size_t num_classes = 4;
  Activation ffn_activation = Activation::Gelu;

  void validate() const;
  std::size_t head_dim() const { return d_model / num_heads; }
  // Closed-form size of Φ.
  std::size_t parameter_count() const;
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// W_q, W_k, W_v are stored as [d × d]; column block i (width d/h) is head i's
// projection W_q^i etc.
struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnWeights {
  Tensor w1, b1, w2, b2;
};

struct LayerNormWeights {
  Tensor gain, bias;
};

struct BlockWeights {
  LayerNormWeights ln1;
  AttentionWeights attn;
  LayerNormWeights ln2;
  FfnWeights ffn;
};

using TokenSeq = std::vector<std::uint32_t>;

class Backbone {
 public:
  Backbone(const ModelConfig& cfg, std::uint64_t seed);
  // Rebuilds a backbone from named parameters (checkpoint load). Every
  // expected name must be present with the expected shape.
  Backbone(const ModelConfig& cfg, const std::vector<NamedTensor>& params);

  const ModelConfig& config() const { return cfg_; }
  // Φ in a fixed order.
  const std::vector<NamedTensor>& parameters() const { return params_; }
  Tensor parameter(std::string_view name) const;
  std::size_t parameter_count() const;

  const BlockWeights& block(std::size_t b) const;
  const Tensor& token_embedding() const { return tokens_; }
  const Tensor& position_embedding() const { return positions_; }
  const Tensor& head_weight() const { return head_w_; }
  const Tensor& head_bias() const { return head_b_; }

  void set_trainable(bool on);
  bool any_trainable() const;
  Backbone clone() const;
  std::uint64_t hash() const;

  // Single-sequence forms over x [n×d].
  Tensor attention_head_forward(const Tensor& x, std::size_t block, std::size_t head) const;
  Tensor mha_forward(const Tensor& x, std::size_t block) const;
  Tensor ffn_forward(const Tensor& h, std::size_t block) const;

  // h holds `segments` stacked sequences of equal length.
  Tensor block_forward(const Tensor& h, std::size_t block, const DeltaHooks& hooks, std::size_t segments = 1,
                       SiteTrace* trace = nullptr) const;

  // Token plus position embeddings, [B·n × d].
  Tensor embed(const std::vector<TokenSeq>& batch) const;
  // Class logits [B × num_classes]; every sequence in the batch must have the
  // same length.
  Tensor forward(const std::vector<TokenSeq>& batch, const DeltaHooks& hooks, SiteTrace* trace = nullptr) const;
  std::vector<double> model_forward(const TokenSeq& tokens, const DeltaHooks& hooks) const;

 private:
  void bind_fields();
  Tensor apply_site(std::size_t block, SiteKind kind, const Tensor& h_in, Tensor f_out, const DeltaHooks& hooks,
                    SiteTrace* trace) const;

  ModelConfig cfg_;
  std::vector<NamedTensor> params_;
  Tensor tokens_, positions_, head_w_, head_b_;
  std::vector<BlockWeights> blocks_;
};

// Names of the bias tensors that hook sites of this kind offset, e.g.
// Query -> "blocks.0.attn.bq".
std::string bias_parameter_name(std::size_t block, SiteKind kind);

}  // namespace petlab
