#include <doctest.h>

#include <filesystem>

#include "petlab/errors.hpp"
#include "petlab/optim.hpp"
#include "petlab/pet.hpp"
#include "petlab/tasks.hpp"
#include "petlab/trainer.hpp"
#include "test_util.hpp"

using namespace petlab;
using testutil::tiny_config;

namespace {

PetConfig cfg_of(PetKind k) {
  PetConfig c;
  c.kind = k;
  return c;
}

// Scalars that move after one step with every gradient entry set to one.
std::size_t changed_after_dense_step(const TuningModule& module) {
  std::vector<std::vector<double>> before;
  for (const auto& t : module.trainable_tensors()) before.push_back(t.tensor.values());
  Optimizer opt(module.trainable_tensors(), OptimizerConfig{});
  for (auto t : module.trainable_tensors()) {
    auto g = t.tensor.mutable_grad();
    std::fill(g.begin(), g.end(), 1.0);
  }
  opt.step();
  std::size_t changed = 0;
  const auto after = module.trainable_tensors();
  for (std::size_t i = 0; i < after.size(); ++i) {
    for (std::size_t j = 0; j < before[i].size(); ++j) changed += after[i].tensor.at(j) != before[i][j];
  }
  return changed;
}

SyntheticTask small_task(std::size_t classes = 3) {
  TaskSpec s;
  s.vocab_size = 24;
  s.seq_len = 8;
  s.num_classes = classes;
  s.train_size = 120;
  s.val_size = 30;
  s.test_size = 30;
  s.filler_start = 6;
  s.seed = 5;
  return gen_task(s);
}

}  // namespace

TEST_CASE("paper defaults") {
  CHECK(kDefaultPromptLen == 100);
  CHECK(kDefaultLoraRank == 8);
  CHECK(kDefaultLoraAlpha == 16.0);
  CHECK(kDefaultAdapterBottleneck == 24);
  const PetConfig c;
  CHECK(c.lora_rank == 8);
  CHECK(c.lora_alpha == 16.0);
  CHECK(c.prompt_len == 100);
  CHECK(c.adapter_bottleneck == 24);
  CHECK_FALSE(c.adapter_bias);
}

TEST_CASE("prompt accounting and length check") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 1);
  PetConfig p = cfg_of(PetKind::Prompt);
  p.prompt_len = 4;
  const PetModule mod = attach_prompt(bb, p, 3, 8);
  CHECK(count_trainable(mod) == 32);
  CHECK(mod.trainable_count() == 32);
  CHECK(pet_parameter_count(p, m) == 32);
  p.prompt_len = 9;
  CHECK_THROWS_AS(attach_prompt(bb, p, 3, 8), ConfigError);
  p.prompt_len = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("zero prompt rows still change the logits") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 2);
  PetConfig p = cfg_of(PetKind::Prompt);
  p.prompt_len = 3;
  PetModule mod = attach_prompt(bb, p, 4, 6);
  Tensor w = mod.weight("prompt");
  std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  Rng rng(40);
  const auto batch = testutil::rand_batch(rng, 3, 6, m.vocab_size);
  CHECK(max_abs_diff(bb.forward(batch, mod.hooks()), bb.forward(batch, {})) > 1e-6);
}

TEST_CASE("bitfit count equals the bias registry") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 3);
  std::size_t expect = 0;
  for (const auto& p : bb.parameters()) {
    const auto& n = p.name;
    const bool attn_bias = n.find(".attn.b") != std::string::npos;
    const bool ln_bias = n.find(".ln1.bias") != std::string::npos || n.find(".ln2.bias") != std::string::npos;
    if (attn_bias || ln_bias) expect += p.tensor.size();
  }
  const PetModule mod = attach_bitfit(bb);
  CHECK(count_trainable(mod) == expect);
  CHECK(pet_parameter_count(cfg_of(PetKind::BitFit), m) == expect);
  CHECK(expect == 2 * 6 * 8);
}

TEST_CASE("lora accounting example") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 4);
  PetConfig p = cfg_of(PetKind::LoRA);
  p.lora_rank = 2;
  const PetModule mod = attach_lora(bb, p, 1);
  CHECK(count_trainable(mod) == 128);
  CHECK(pet_parameter_count(p, m) == 128);
  p.lora_rank = 9;
  CHECK_THROWS_AS(attach_lora(bb, p, 1), ConfigError);
}

TEST_CASE("adapter accounting example") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 5);
  PetConfig p = cfg_of(PetKind::Adapter);
  p.adapter_bottleneck = 3;
  const PetModule mod = attach_adapter(bb, p, 1);
  std::size_t enumerated = 0;
  for (const auto& w : mod.weights()) enumerated += w.tensor.size();
  CHECK(count_trainable(mod) == enumerated);
  CHECK(enumerated == 2 * 2 * (2 * 8 * 3));
  p.adapter_bias = true;
  const PetModule with_bias = attach_adapter(bb, p, 1);
  CHECK(count_trainable(with_bias) == 2 * 2 * (2 * 8 * 3 + 3 + 8));
  CHECK(pet_parameter_count(p, m) == count_trainable(with_bias));
}

TEST_CASE("zero-delta initialisation leaves the backbone forward unchanged") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 6);
  Rng rng(41);
  const auto batch = testutil::rand_batch(rng, 4, 7, m.vocab_size);
  const std::vector<std::size_t> labels{0, 1, 2, 0};
  const Tensor base = bb.forward(batch, {});
  for (PetKind k : {PetKind::BitFit, PetKind::LoRA, PetKind::Adapter}) {
    const PetModule mod = attach_pet(bb, cfg_of(k), 7, 7);
    const Tensor out = bb.forward(batch, mod.hooks());
    CHECK(bitwise_equal(out, base));
    CHECK(cross_entropy(out, labels).item() == cross_entropy(base, labels).item());
  }
}

TEST_CASE("unified view conformance at every hooked site") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 7);
  Rng rng(42);
  const auto batch = testutil::rand_batch(rng, 2, 5, m.vocab_size);
  for (PetKind k : {PetKind::BitFit, PetKind::LoRA, PetKind::Adapter}) {
    PetModule mod = attach_pet(bb, cfg_of(k), 8, 5);
    for (auto w : mod.trainable_tensors()) {
      for (auto& v : w.tensor.mutable_data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
    SiteTrace trace;
    bb.forward(batch, mod.hooks(), &trace);
    CHECK_FALSE(trace.empty());
    for (const auto& [site, rec] : trace) {
      for (std::size_t i = 0; i < rec.h_out.size(); ++i) CHECK(rec.h_out.at(i) == rec.f_out.at(i) + rec.delta.at(i));
    }
  }
}

TEST_CASE("trainable count equals scalars moved by a dense step") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 8);
  for (PetKind k : {PetKind::Prompt, PetKind::BitFit, PetKind::LoRA, PetKind::Adapter}) {
    PetConfig c = cfg_of(k);
    c.prompt_len = 5;
    c.adapter_bias = k == PetKind::Adapter;
    const PetModule mod = attach_pet(bb, c, 9, 6);
    CHECK(changed_after_dense_step(mod) == mod.trainable_count());
  }
}

TEST_CASE("two modules on one site are rejected") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 9);
  const PetModule a = attach_pet(bb, cfg_of(PetKind::LoRA), 1, 6);
  const PetModule b = attach_pet(bb, cfg_of(PetKind::BitFit), 1, 6);
  DeltaHooks h = a.hooks();
  CHECK_THROWS_AS(h.merge(b.hooks()), ConfigError);
  PetConfig ad = cfg_of(PetKind::Adapter);
  DeltaHooks ok = a.hooks();
  CHECK_NOTHROW(ok.merge(attach_pet(bb, ad, 1, 6).hooks()));
}

TEST_CASE("freeze contract") {
  const ModelConfig m = tiny_config();
  Backbone bb(m, 10);
  freeze_backbone(bb);
  CHECK_FALSE(bb.any_trainable());
  CHECK_THROWS_AS(Optimizer(bb.parameters(), OptimizerConfig{}), UsageError);

  const SyntheticTask task = small_task();
  const std::uint64_t before = bb.hash();
  PetModule bitfit = attach_bitfit(bb);
  const auto init = bitfit.weights()[0].tensor.values();
  TrainConfig tc;
  tc.max_steps = 100;
  tc.learning_rate = 1e-2;
  tc.batch_size = 8;
  tc.eval_every = 25;
  ConvergenceCriterion never;
  never.patience = 1000;
  fit(bb, bitfit, task, tc, never);
  CHECK(bb.hash() == before);
  CHECK(bitfit.weights()[0].tensor.values() != init);
  // Only biases move: folding the offsets into Φ touches bias tensors alone.
  const auto merged = merge_bitfit(bb, bitfit);
  for (std::size_t i = 0; i < merged.size(); ++i) {
    const bool same = bitwise_equal(merged[i].tensor, bb.parameters()[i].tensor);
    const bool is_bias = merged[i].name.find(".attn.b") != std::string::npos ||
                         merged[i].name.find(".bias") != std::string::npos;
    if (!is_bias) CHECK(same);
  }

  // Positive control: FT moves Φ after one step.
  Backbone ft_model = bb.clone();
  FullFineTune ft(ft_model);
  Trainer trainer(ft_model, ft, tc);
  trainer.step(task.train.slice(0, 8));
  CHECK(ft_model.hash() != before);
}

TEST_CASE("merged bitfit biases reproduce the bitfit forward") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 11);
  PetModule mod = attach_bitfit(bb);
  Rng rng(43);
  for (auto w : mod.trainable_tensors()) {
    for (auto& v : w.tensor.mutable_data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  }
  const Backbone merged(m, merge_bitfit(bb, mod));
  const auto batch = testutil::rand_batch(rng, 3, 5, m.vocab_size);
  CHECK(max_abs_diff(merged.forward(batch, {}), bb.forward(batch, mod.hooks())) < 1e-12);
}

TEST_CASE("pet module checkpoint round trip") {
  const ModelConfig m = tiny_config();
  const Backbone bb(m, 12);
  for (PetKind k : {PetKind::Prompt, PetKind::BitFit, PetKind::LoRA, PetKind::Adapter}) {
    PetConfig c = cfg_of(k);
    c.prompt_len = 3;
    PetModule mod = attach_pet(bb, c, 2, 5);
    Rng rng(44);
    for (auto w : mod.trainable_tensors()) {
      for (auto& v : w.tensor.mutable_data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    }
    const auto path = std::filesystem::temp_directory_path() / ("petlab_pet_" + std::string(pet_kind_name(k)) + ".json");
    save_pet_module(mod, path);
    const PetModule back = load_pet_module(path);
    std::filesystem::remove(path);
    CHECK(back.kind() == k);
    CHECK(back.trainable_count() == mod.trainable_count());
    const auto batch = testutil::rand_batch(rng, 2, 5, m.vocab_size);
    CHECK(bitwise_equal(bb.forward(batch, back.hooks()), bb.forward(batch, mod.hooks())));
    CHECK(pet_module_to_json(back).dump() == pet_module_to_json(mod).dump());
  }
}

TEST_CASE("pet parsing") {
  CHECK(parse_pet_kind("lora") == PetKind::LoRA);
  CHECK(parse_pet_kind("bitfit") == PetKind::BitFit);
  CHECK_THROWS_AS(parse_pet_kind("prefix"), ConfigError);
  PetConfig c = cfg_of(PetKind::BitFit);
  c.target_sites = {"blocks.0.ffn.out"};
  CHECK_THROWS_AS(pet_parameter_count(c, tiny_config()), ConfigError);
}
