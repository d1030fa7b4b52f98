#include "petlab/gradsuite.hpp"

#include <functional>

#include "petlab/apet.hpp"
#include "petlab/ops.hpp"
#include "petlab/pet.hpp"
#include "petlab/seeding.hpp"
#include "petlab/transformer.hpp"

namespace petlab {
namespace {

// Projects a tensor onto a fixed random direction so no gradient entry is
// structurally zero.
Tensor probe(const Tensor& out, Rng& rng) {
  Tensor r = Tensor::uniform(out.shape(), -1.0, 1.0, rng);
  return sum(hadamard(out, r));
}

Tensor rnd(Shape shape, Rng& rng, bool grad = true) { return Tensor::uniform(std::move(shape), -2.0, 2.0, rng, grad); }

struct Builder {
  Rng& rng;
  GradCheckOptions opts;
  std::vector<GradCase>& out;

  void check(const std::string& name, const std::string& group, std::vector<NamedTensor> inputs,
             std::function<Tensor()> f) {
    GradCheckOptions o = opts;
    o.seed = rng();
    out.push_back({name, group, grad_check(f, inputs, o)});
  }
};

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.num_blocks = 2;
  mc.d_model = 8;
  mc.num_heads = 2;
  mc.d_ff = 16;
  mc.vocab_size = 24;
  mc.max_seq_len = 10;
  mc.num_classes = 3;
  return mc;
}

std::vector<TokenSeq> tiny_batch(const ModelConfig& mc, Rng& rng, std::size_t batch, std::size_t len) {
  std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(mc.vocab_size - 1));
  std::vector<TokenSeq> out(batch, TokenSeq(len));
  for (auto& s : out)
    for (auto& t : s) t = tok(rng);
  return out;
}

std::vector<std::size_t> tiny_labels(const ModelConfig& mc, Rng& rng, std::size_t batch) {
  std::uniform_int_distribution<std::size_t> lab(0, mc.num_classes - 1);
  std::vector<std::size_t> out(batch);
  for (auto& y : out) y = lab(rng);
  return out;
}

// Module weights that start at zero (up projections, offsets) would hide the
// gradient of their partners; give every weight a random value first.
void randomise(const std::vector<NamedTensor>& ts, Rng& rng) {
  for (auto t : ts) {
    auto d = t.tensor.mutable_data();
    for (auto& v : d) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  }
}

void primitive_cases(Builder& b) {
  Rng& g = b.rng;
  {
    Tensor x = rnd({3, 4}, g), y = rnd({4, 2}, g);
    b.check("matmul", "primitive", {{"a", x}, {"b", y}}, [=] {
      Rng r(7);
      return probe(matmul(x, y), r);
    });
  }
  {
    Tensor x = rnd({3, 5}, g);
    b.check("transpose", "primitive", {{"a", x}}, [=] {
      Rng r(8);
      return probe(transpose(x), r);
    });
  }
  {
    Tensor x = rnd({2, 3}, g), y = rnd({2, 3}, g);
    b.check("add+hadamard+scale", "primitive", {{"a", x}, {"b", y}}, [=] {
      Rng r(9);
      return probe(scale(hadamard(add(x, y), y), -1.7), r);
    });
  }
  {
    Tensor x = rnd({4, 3}, g), bias = rnd({3}, g), row = rnd({1, 3}, g);
    b.check("add_bias+broadcast_rows", "primitive", {{"a", x}, {"bias", bias}, {"row", row}}, [=] {
      Rng r(10);
      return probe(add(add_bias(x, bias), broadcast_rows(row, 4)), r);
    });
  }
  for (Activation act : {Activation::Relu, Activation::Gelu, Activation::Sigmoid}) {
    Tensor x = rnd({3, 4}, g);
    b.check("activate." + std::string(activation_name(act)), "primitive", {{"x", x}}, [=] {
      Rng r(11);
      return probe(activate(x, act), r);
    });
  }
  {
    Tensor x = rnd({3, 5}, g);
    b.check("softmax_rows", "primitive", {{"x", x}}, [=] {
      Rng r(12);
      return probe(softmax_rows(x), r);
    });
  }
  {
    Tensor x = rnd({4, 6}, g), gain = rnd({6}, g), bias = rnd({6}, g);
    b.check("layer_norm", "primitive", {{"x", x}, {"gain", gain}, {"bias", bias}}, [=] {
      Rng r(13);
      return probe(layer_norm(x, gain, bias), r);
    });
  }
  {
    Tensor x = rnd({2, 6}, g);
    b.check("reshape+slice+concat", "primitive", {{"x", x}}, [=] {
      Rng r(14);
      Tensor y = reshape(x, {3, 4});
      return probe(concat_cols({slice_cols(y, 2, 2), slice_cols(y, 0, 1)}), r);
    });
  }
  {
    Tensor table = rnd({7, 3}, g);
    std::vector<std::uint32_t> ids{1, 4, 1, 6, 0};
    b.check("embedding", "primitive", {{"table", table}}, [=] {
      Rng r(15);
      return probe(embedding(table, ids), r);
    });
  }
  {
    Tensor x = rnd({6, 3}, g), prefix = rnd({2, 3}, g);
    b.check("prepend_rows+segment_mean", "primitive", {{"x", x}, {"prefix", prefix}}, [=] {
      Rng r(16);
      return probe(segment_mean(prepend_rows(x, prefix, 2), 2, 1), r);
    });
  }
  {
    Tensor q = rnd({6, 4}, g), k = rnd({6, 4}, g), v = rnd({6, 4}, g);
    b.check("attention_core", "primitive", {{"q", q}, {"k", k}, {"v", v}}, [=] {
      Rng r(17);
      return probe(attention_core(q, k, v, 2, 2), r);
    });
  }
  {
    Tensor logits = rnd({4, 3}, g);
    std::vector<std::size_t> labels{0, 2, 1, 2};
    b.check("cross_entropy", "primitive", {{"logits", logits}}, [=] { return cross_entropy(logits, labels); });
  }
}

void model_cases(Builder& b) {
  Rng& g = b.rng;
  const ModelConfig mc = tiny_model();
  const auto batch = tiny_batch(mc, g, 3, 5);
  const auto labels = tiny_labels(mc, g, 3);
  const std::uint64_t model_seed = g();

  {
    auto model = std::make_shared<Backbone>(mc, model_seed);
    model->set_trainable(true);
    b.check("backbone", "backbone", model->parameters(),
            [=] { return cross_entropy(model->forward(batch, DeltaHooks{}), labels); });
  }

  for (PetKind kind : {PetKind::Prompt, PetKind::BitFit, PetKind::LoRA, PetKind::Adapter}) {
    auto model = std::make_shared<Backbone>(mc, model_seed);
    PetConfig cfg;
    cfg.kind = kind;
    cfg.prompt_len = 3;
    cfg.lora_rank = 2;
    cfg.adapter_bottleneck = 3;
    cfg.adapter_activation = Activation::Gelu;
    auto module = std::make_shared<PetModule>(attach_pet(*model, cfg, g(), 5));
    randomise(module->weights(), g);
    const DeltaHooks hooks = module->hooks();
    b.check("pet." + std::string(pet_kind_name(kind)), "pet", module->weights(),
            [=] { return cross_entropy(model->forward(batch, hooks), labels); });
  }

  // One module per insertion op with partial masks.
  const std::vector<std::pair<std::string, ApetLayout>> layouts = {
      {"add", {{InsertionKind::Add, {"blocks.0.attn.q", "blocks.1.ffn.out"}}}},
      {"concat_prompt", {{InsertionKind::ConcatPrompt, {}, 2, 1.0, 3}}},
      {"concat_lowrank", {{InsertionKind::ConcatLowRank, {"blocks.0.attn.v", "blocks.1.attn.k"}, 3, 2.0}}},
      {"plugin", {{InsertionKind::PlugIn, {"blocks.0.attn.o", "blocks.1.ffn.out"}, 3, 1.0, 4, Activation::Sigmoid}}},
  };
  for (const auto& [name, layout] : layouts) {
    for (MaskMode mode : {MaskMode::Adjacent, MaskMode::Discrete}) {
      auto model = std::make_shared<Backbone>(mc, model_seed);
      const std::size_t cap = layout_capacity(layout, mc);
      ApetOptions opts;
      opts.mode = mode;
      opts.seed = g();
      opts.input_len = 5;
      auto module = std::make_shared<ApetModule>(build_apet(*model, layout, (cap * 2) / 3, opts));
      randomise(module->trainable_tensors(), g);
      const DeltaHooks hooks = module->hooks();
      b.check("apet." + name + "." + std::string(mask_mode_name(mode)), "apet", module->trainable_tensors(),
              [=] { return cross_entropy(model->forward(batch, hooks), labels); });
    }
  }
}

}  // namespace

std::vector<GradCase> run_gradcheck_suite(std::uint64_t seed, std::size_t rounds, const GradCheckOptions& options) {
  std::vector<GradCase> out;
  for (std::size_t round = 0; round < rounds; ++round) {
    Rng rng(mix_seed(seed, round));
    Builder b{rng, options, out};
    primitive_cases(b);
    model_cases(b);
  }
  return out;
}

}  // namespace petlab
