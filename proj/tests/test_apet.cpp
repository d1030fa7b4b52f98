#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "petlab/apet.hpp"
#include "petlab/autodiff.hpp"
#include "petlab/errors.hpp"
#include "petlab/optim.hpp"
#include "petlab/trainer.hpp"
#include "test_util.hpp"

using namespace petlab;
using testutil::rand_int;
using testutil::tiny_config;

namespace {

std::size_t popcount(const Tensor& m) {
  std::size_t n = 0;
  for (double v : m.values()) n += v == 1.0;
  return n;
}

MaskSpec spec_of(MaskMode mode, std::size_t r, std::size_t c, std::size_t n, std::uint64_t seed,
                 MaskAxis axis = MaskAxis::Rows) {
  MaskSpec s;
  s.mode = mode;
  s.rows = r;
  s.cols = c;
  s.budget = n;
  s.seed = seed;
  s.axis = axis;
  return s;
}

// Ones per line (row or column) of a mask.
std::vector<std::size_t> line_counts(const Tensor& m, bool by_rows) {
  const std::size_t lines = by_rows ? m.rows() : m.cols(), len = by_rows ? m.cols() : m.rows();
  std::vector<std::size_t> out(lines, 0);
  for (std::size_t l = 0; l < lines; ++l) {
    for (std::size_t p = 0; p < len; ++p) out[l] += by_rows ? m.at(l, p) == 1.0 : m.at(p, l) == 1.0;
  }
  return out;
}

void randomize(const ApetModule& mod, Rng& rng, double scale = 0.5) {
  for (const auto& w : mod.masked_weights()) {
    Tensor t = w.weight.weight();
    for (auto& v : t.mutable_data()) v = std::uniform_real_distribution<double>(-scale, scale)(rng);
  }
}

void randomize(const PetModule& mod, Rng& rng, double scale = 0.5) {
  for (auto w : mod.trainable_tensors()) {
    for (auto& v : w.tensor.mutable_data()) v = std::uniform_real_distribution<double>(-scale, scale)(rng);
  }
}

// Random layout over all four insertion ops on a tiny model.
ApetLayout random_layout(Rng& rng, const ModelConfig& cfg) {
  const auto sites = all_sites(cfg);
  ApetLayout layout;
  std::vector<std::string> pool = sites;
  std::shuffle(pool.begin(), pool.end(), rng);
  std::size_t next = 0;
  for (InsertionKind op : {InsertionKind::Add, InsertionKind::ConcatLowRank, InsertionKind::PlugIn}) {
    if (rng() % 4 == 0) continue;
    LayoutEntry e;
    e.op = op;
    e.rank = rand_int(rng, 1, 3);
    e.alpha = 0.5 + static_cast<double>(rng() % 4);
    const std::size_t k = rand_int(rng, 1, 2);
    for (std::size_t i = 0; i < k && next < pool.size(); ++i) e.sites.push_back(pool[next++]);
    layout.push_back(e);
  }
  if (rng() % 2 == 0 || layout.empty()) {
    LayoutEntry p;
    p.op = InsertionKind::ConcatPrompt;
    p.prompt_len = rand_int(rng, 1, 3);
    layout.push_back(p);
  }
  return layout;
}

}  // namespace

TEST_CASE("adjacent mask examples") {
  const Tensor two_cols = gen_adjacent_mask(spec_of(MaskMode::Adjacent, 4, 4, 8, 3, MaskAxis::Columns));
  CHECK(popcount(two_cols) == 8);
  const auto cols = line_counts(two_cols, false);
  CHECK(std::count(cols.begin(), cols.end(), 4u) == 2);
  CHECK(std::count(cols.begin(), cols.end(), 0u) == 2);

  for (MaskMode mode : {MaskMode::Adjacent, MaskMode::Discrete}) {
    CHECK(popcount(gen_mask(spec_of(mode, 3, 4, 0, 1))) == 0);
    CHECK(popcount(gen_mask(spec_of(mode, 3, 4, 12, 1))) == 12);
    CHECK_THROWS_AS(gen_mask(spec_of(mode, 3, 4, 13, 1)), BudgetError);
  }

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor m = gen_adjacent_mask(spec_of(MaskMode::Adjacent, 3, 5, 7, seed));
    CHECK(popcount(m) == 7);
    const auto rows = line_counts(m, true);
    const auto full = std::find(rows.begin(), rows.end(), 5u);
    REQUIRE(full != rows.end());
    const std::size_t r = static_cast<std::size_t>(full - rows.begin());
    REQUIRE(r + 1 < 3);
    CHECK(rows[r + 1] == 2);
    // The two partial entries sit next to each other.
    std::size_t first = 5;
    for (std::size_t c = 0; c < 5; ++c) {
      if (m.at(r + 1, c) == 1.0) {
        first = c;
        break;
      }
    }
    CHECK(m.at(r + 1, first + 1) == 1.0);
  }
}

TEST_CASE("adjacent mask structure on random specs") {
  Rng rng(50);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t r = rand_int(rng, 1, 9), c = rand_int(rng, 1, 9), n = rand_int(rng, 0, r * c);
    const MaskAxis axis = rng() % 2 ? MaskAxis::Rows : MaskAxis::Columns;
    const Tensor m = gen_adjacent_mask(spec_of(MaskMode::Adjacent, r, c, n, rng(), axis));
    CHECK(popcount(m) == n);
    const bool by_rows = axis == MaskAxis::Rows;
    const std::size_t len = by_rows ? c : r;
    const auto counts = line_counts(m, by_rows);
    // Non-empty lines are consecutive; all but the last are full.
    std::vector<std::size_t> used;
    for (std::size_t l = 0; l < counts.size(); ++l) {
      if (counts[l] > 0) used.push_back(l);
    }
    for (std::size_t i = 1; i < used.size(); ++i) CHECK(used[i] == used[i - 1] + 1);
    for (std::size_t i = 0; i + 1 < used.size(); ++i) CHECK(counts[used[i]] == len);
    if (!used.empty()) {
      // The ones of the last line form one contiguous run.
      const std::size_t l = used.back();
      std::size_t runs = 0;
      bool prev = false;
      for (std::size_t p = 0; p < len; ++p) {
        const bool on = by_rows ? m.at(l, p) == 1.0 : m.at(p, l) == 1.0;
        runs += on && !prev;
        prev = on;
      }
      CHECK(runs == 1);
    }
  }
}

TEST_CASE("discrete mask sampling contract") {
  Rng rng(51);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = rand_int(rng, 1, 12), c = rand_int(rng, 1, 12), n = rand_int(rng, 0, r * c);
    const auto s = spec_of(MaskMode::Discrete, r, c, n, rng());
    const Tensor m = gen_discrete_mask(s);
    CHECK(popcount(m) == n);
    CHECK(bitwise_equal(m, gen_discrete_mask(s)));
  }
  const auto a = gen_discrete_mask(spec_of(MaskMode::Discrete, 8, 8, 20, 1));
  const auto b = gen_discrete_mask(spec_of(MaskMode::Discrete, 8, 8, 20, 2));
  CHECK_FALSE(bitwise_equal(a, b));
}

TEST_CASE("discrete mask cells are selected uniformly") {
  const std::size_t r = 4, c = 5, n = 7, seeds = 10000;
  std::vector<double> freq(r * c, 0.0);
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const Tensor m = gen_discrete_mask(spec_of(MaskMode::Discrete, r, c, n, s));
    for (std::size_t i = 0; i < m.size(); ++i) freq[i] += m.at(i);
  }
  const double p = static_cast<double>(n) / static_cast<double>(r * c);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(seeds));
  for (double f : freq) CHECK(std::fabs(f / static_cast<double>(seeds) - p) < 3 * sigma);
}

TEST_CASE("adjacent and discrete masks host the same count") {
  Rng rng(52);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = rand_int(rng, 1, 8), c = rand_int(rng, 1, 8), n = rand_int(rng, 0, r * c);
    CHECK(popcount(gen_adjacent_mask(spec_of(MaskMode::Adjacent, r, c, n, trial))) ==
          popcount(gen_discrete_mask(spec_of(MaskMode::Discrete, r, c, n, trial))));
  }
}

TEST_CASE("budget allocation examples") {
  const std::vector<BudgetSite> two{{"a", {1, 8}}, {"b", {1, 8}}};
  const BudgetPlan zero = budget_allocate(0, two);
  for (const auto& a : zero.allocations) CHECK(a.count == 0);
  const BudgetPlan odd = budget_allocate(7, two);
  CHECK(odd.allocations[0].count == 4);
  CHECK(odd.allocations[1].count == 3);
  CHECK(budget_allocate(7, two).allocations[0].count == 4);
  CHECK_THROWS_AS(budget_allocate(17, two), BudgetError);

  // Total taken from the LoRA r=2 reference count.
  const ModelConfig cfg = tiny_config();
  const BudgetPlan p = budget_allocate(128, layout_hosts(default_apet_layout(cfg), cfg));
  std::size_t total = 0;
  for (const auto& a : p.allocations) total += a.count;
  CHECK(total == 128);
  CHECK(p.total == 128);
}

TEST_CASE("budget allocation properties") {
  Rng rng(53);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<BudgetSite> sites;
    const std::size_t k = rand_int(rng, 1, 8);
    std::size_t cap = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const Shape s{rand_int(rng, 1, 6), rand_int(rng, 1, 9)};
      cap += s[0] * s[1];
      sites.push_back({"s" + std::to_string(i), s});
    }
    const std::size_t n = rand_int(rng, 0, cap);
    const BudgetPlan plan = budget_allocate(n, sites);
    CHECK_NOTHROW(plan.validate());
    CHECK(plan.capacity() == cap);
    std::size_t sum = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const auto& a = plan.allocations[i];
      const std::size_t c = a.host_shape[0] * a.host_shape[1];
      CHECK(a.count <= c);
      const double exact = static_cast<double>(n) * static_cast<double>(c) / static_cast<double>(cap);
      CHECK(std::fabs(static_cast<double>(a.count) - exact) < 1.0);
      sum += a.count;
    }
    CHECK(sum == n);
    const BudgetPlan back = budget_plan_from_json(budget_plan_to_json(plan));
    CHECK(budget_plan_to_json(back) == budget_plan_to_json(plan));
  }
}

TEST_CASE("add insertion") {
  const ModelConfig cfg = tiny_config();
  const Backbone bb(cfg, 1);
  Rng rng(54);
  const auto batch = testutil::rand_batch(rng, 3, 6, cfg.vocab_size);
  const Tensor base = bb.forward(batch, {});

  MaskedWeight zero(Tensor::zeros({1, cfg.d_model}, true), Tensor::full({1, cfg.d_model}, 1.0));
  DeltaHooks h;
  h.bind("blocks.0.attn.o", apet_add(zero, cfg.d_model));
  CHECK(bitwise_equal(bb.forward(batch, h), base));

  CHECK_THROWS_AS(apet_add(MaskedWeight(Tensor::zeros({2, cfg.d_model}), Tensor::zeros({2, cfg.d_model})), cfg.d_model),
                  ConfigError);
  CHECK_THROWS_AS(apet_add(zero, cfg.d_model + 1), ConfigError);

  // Gradient reaches only the unmasked entries.
  std::vector<double> mv(cfg.d_model, 0.0);
  mv[1] = mv[5] = 1.0;
  MaskedWeight part(testutil::rand_tensor({1, cfg.d_model}, rng), Tensor::from({1, cfg.d_model}, mv));
  DeltaHooks g;
  g.bind("blocks.1.ln2", apet_add(part, cfg.d_model));
  backward(cross_entropy(bb.forward(batch, g), std::vector<std::size_t>{0, 1, 2}));
  const auto grad = part.weight().grad();
  for (std::size_t i = 0; i < mv.size(); ++i) {
    if (mv[i] == 0.0) CHECK(grad[i] == 0.0);
    else CHECK(grad[i] != 0.0);
  }
}

TEST_CASE("special cases: full masks reproduce the reference methods") {
  const ModelConfig cfg = tiny_config();
  Rng rng(55);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Backbone bb(cfg, 100 + seed);
    for (PetKind k : {PetKind::Prompt, PetKind::BitFit, PetKind::LoRA, PetKind::Adapter}) {
      PetConfig pc;
      pc.kind = k;
      pc.prompt_len = 3;
      pc.lora_rank = 2;
      pc.adapter_bottleneck = 3;
      PetModule pet = attach_pet(bb, pc, seed, 6);
      randomize(pet, rng);
      const ApetModule apet = reduce_to_pet(pet);
      CHECK(apet.trainable_count() == pet.trainable_count());
      CHECK(count_trainable(apet) == count_trainable(pet));
      double worst = 0.0;
      bool identical = true;
      for (int i = 0; i < 100; ++i) {
        const auto batch = testutil::rand_batch(rng, 1, 6, cfg.vocab_size);
        const Tensor a = bb.forward(batch, pet.hooks());
        const Tensor b = bb.forward(batch, apet.hooks());
        worst = std::max(worst, max_abs_diff(a, b));
        identical = identical && bitwise_equal(a, b);
      }
      CHECK(worst < 1e-12);
      if (k == PetKind::BitFit) CHECK(identical);
    }
  }
}

TEST_CASE("zero masks leave the backbone unchanged") {
  const ModelConfig cfg = tiny_config();
  const Backbone bb(cfg, 2);
  Rng rng(56);
  const auto batch = testutil::rand_batch(rng, 2, 6, cfg.vocab_size);
  const Tensor base = bb.forward(batch, {});
  for (InsertionKind op : {InsertionKind::Add, InsertionKind::ConcatLowRank, InsertionKind::PlugIn}) {
    LayoutEntry e;
    e.op = op;
    e.rank = 2;
    e.sites = {"blocks.0.attn.v", "blocks.1.ffn.out"};
    ApetModule mod = build_apet(bb, {e}, 0, {});
    randomize(mod, rng);
    CHECK(bitwise_equal(bb.forward(batch, mod.hooks()), base));
  }
  // Prompt form: all-zero mask behaves like an explicit zero prompt.
  LayoutEntry p;
  p.op = InsertionKind::ConcatPrompt;
  p.prompt_len = 3;
  ApetModule mod = build_apet(bb, {p}, 0, {MaskMode::Discrete, MaskAxis::Rows, 0, 6});
  randomize(mod, rng);
  PetConfig pc;
  pc.kind = PetKind::Prompt;
  pc.prompt_len = 3;
  PetModule zero = attach_prompt(bb, pc, 0, 6);
  Tensor w = zero.weight("prompt");
  std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  CHECK(bitwise_equal(bb.forward(batch, mod.hooks()), bb.forward(batch, zero.hooks())));
}

TEST_CASE("zero up projection leaves the backbone unchanged") {
  const ModelConfig cfg = tiny_config();
  const Backbone bb(cfg, 3);
  Rng rng(57);
  const auto batch = testutil::rand_batch(rng, 2, 6, cfg.vocab_size);
  MaskedWeight down(testutil::rand_tensor({cfg.d_model, 3}, rng), Tensor::full({cfg.d_model, 3}, 1.0));
  MaskedWeight up(Tensor::zeros({3, cfg.d_model}, true), Tensor::full({3, cfg.d_model}, 1.0));
  DeltaHooks h;
  h.bind("blocks.0.ffn.out", apet_plugin(down, up, Activation::Relu));
  CHECK(bitwise_equal(bb.forward(batch, h), bb.forward(batch, {})));
  CHECK_THROWS_AS(apet_plugin(down, MaskedWeight(Tensor::zeros({2, cfg.d_model}), Tensor::zeros({2, cfg.d_model})),
                              Activation::Relu),
                  ConfigError);
  CHECK_THROWS_AS(apet_concatenate_lowrank(down, down, 1.0), ConfigError);
}

TEST_CASE("budget exactness after a dense step") {
  const ModelConfig cfg = tiny_config();
  const Backbone bb(cfg, 4);
  Rng rng(58);
  for (int trial = 0; trial < 50; ++trial) {
    const ApetLayout layout = random_layout(rng, cfg);
    const std::size_t cap = layout_capacity(layout, cfg);
    const std::size_t n = rand_int(rng, 0, cap);
    ApetOptions o;
    o.mode = rng() % 2 ? MaskMode::Adjacent : MaskMode::Discrete;
    o.axis = rng() % 2 ? MaskAxis::Rows : MaskAxis::Columns;
    o.seed = rng();
    o.input_len = 6;
    ApetModule mod = build_apet(bb, layout, n, o);
    CHECK(mod.total_budget() == n);
    std::size_t masks = 0;
    for (const auto& w : mod.masked_weights()) masks += popcount(w.weight.mask());
    CHECK(masks == n);
    std::vector<std::vector<double>> before;
    for (const auto& t : mod.trainable_tensors()) before.push_back(t.tensor.values());
    if (mod.trainable_tensors().empty()) continue;
    Optimizer opt(mod.trainable_tensors(), OptimizerConfig{});
    // Dense gradient of ones pushed through the mask, as backward would.
    for (const auto& w : mod.masked_weights()) {
      Tensor t = w.weight.weight();
      auto g = t.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = w.weight.mask().at(i);
    }
    opt.step();
    std::size_t changed = 0;
    const auto after = mod.trainable_tensors();
    for (std::size_t i = 0; i < after.size(); ++i) {
      for (std::size_t j = 0; j < before[i].size(); ++j) changed += after[i].tensor.at(j) != before[i][j];
    }
    CHECK(changed == n);
  }
  CHECK_THROWS_AS(build_apet(bb, default_apet_layout(cfg), layout_capacity(default_apet_layout(cfg), cfg) + 1, {}),
                  BudgetError);
}

TEST_CASE("masked entries stay fixed through training") {
  const ModelConfig cfg = tiny_config();
  Backbone bb(cfg, 5);
  freeze_backbone(bb);
  TaskSpec ts;
  ts.vocab_size = cfg.vocab_size;
  ts.seq_len = 6;
  ts.num_classes = cfg.num_classes;
  ts.train_size = 90;
  ts.val_size = 30;
  ts.test_size = 30;
  ts.filler_start = 6;
  const SyntheticTask task = gen_task(ts);
  Rng rng(59);
  for (int trial = 0; trial < 4; ++trial) {
    const ApetLayout layout = random_layout(rng, cfg);
    ApetOptions o;
    o.mode = trial % 2 ? MaskMode::Adjacent : MaskMode::Discrete;
    o.seed = trial;
    o.input_len = 6;
    ApetModule mod = build_apet(bb, layout, layout_capacity(layout, cfg) / 2, o);
    randomize(mod, rng);
    std::vector<std::vector<double>> before;
    for (const auto& w : mod.masked_weights()) before.push_back(w.weight.weight().values());
    const std::uint64_t mask_hash = mod.mask_hash();
    const std::uint64_t phi = bb.hash();
    TrainConfig tc;
    tc.max_steps = 100;
    tc.batch_size = 8;
    tc.learning_rate = 1e-2;
    tc.eval_every = 50;
    Trainer trainer(bb, mod, tc);
    for (std::size_t s = 0; s < 100; ++s) trainer.step(task.train.slice((s * 8) % 80, (s * 8) % 80 + 8));
    CHECK(mod.mask_hash() == mask_hash);
    CHECK(bb.hash() == phi);
    std::size_t moved = 0;
    for (std::size_t k = 0; k < before.size(); ++k) {
      const auto& w = mod.masked_weights()[k].weight;
      for (std::size_t i = 0; i < before[k].size(); ++i) {
        if (w.mask().at(i) == 0.0) {
          CHECK(w.weight().at(i) == before[k][i]);
          CHECK(trainer.optimizer().first_moment(k)[i] == 0.0);
          CHECK(trainer.optimizer().second_moment(k)[i] == 0.0);
        } else {
          moved += w.weight().at(i) != before[k][i];
        }
      }
    }
    CHECK(moved > 0);
  }
}

TEST_CASE("apet module checkpoint round trip") {
  const ModelConfig cfg = tiny_config();
  const Backbone bb(cfg, 6);
  Rng rng(60);
  for (int trial = 0; trial < 5; ++trial) {
    const ApetLayout layout = random_layout(rng, cfg);
    ApetOptions o;
    o.seed = trial;
    o.input_len = 6;
    ApetModule mod = build_apet(bb, layout, layout_capacity(layout, cfg) / 3, o);
    randomize(mod, rng);
    const auto path = std::filesystem::temp_directory_path() / ("petlab_apet_" + std::to_string(trial) + ".json");
    save_apet_module(mod, path);
    const ApetModule back = load_apet_module(path);
    std::filesystem::remove(path);
    CHECK(back.total_budget() == mod.total_budget());
    CHECK(back.mask_hash() == mod.mask_hash());
    CHECK(apet_module_to_json(back).dump() == apet_module_to_json(mod).dump());
    const auto batch = testutil::rand_batch(rng, 2, 6, cfg.vocab_size);
    CHECK(bitwise_equal(bb.forward(batch, back.hooks()), bb.forward(batch, mod.hooks())));
  }
  Json doc = apet_module_to_json(build_apet(bb, default_apet_layout(cfg), 10, {}));
  doc["total_budget"] = 11;
  CHECK_THROWS_AS(apet_module_from_json(doc), ConfigError);
}

TEST_CASE("module structure checks") {
  MaskedWeight a(Tensor::zeros({1, 8}), Tensor::full({1, 8}, 1.0));
  CHECK_THROWS_AS(ApetModule({{"a", a}}, {}, 8), ConfigError);
  CHECK_THROWS_AS(ApetModule({{"a", a}}, {{"blocks.0.ln1", InsertionKind::Add, {0}}, {"blocks.0.ln2", InsertionKind::Add, {0}}}, 8),
                  ConfigError);
  const ApetModule ok({{"a", a}}, {{"blocks.0.ln1", InsertionKind::Add, {0}}}, 8);
  CHECK(ok.total_budget() == 8);
  PetConfig biased;
  biased.kind = PetKind::Adapter;
  biased.adapter_bias = true;
  const Backbone bb(tiny_config(), 7);
  CHECK_THROWS_AS(reduce_to_pet(attach_adapter(bb, biased, 1)), ConfigError);
}

TEST_CASE("layout parsing") {
  const ModelConfig cfg = tiny_config();
  const Json j = Json::parse(R"([{"op": "add", "sites": "bias"}, {"op": "concat_lowrank", "sites": "attention", "rank": 2},
                                 {"op": "plugin", "sites": ["blocks.1.ffn.out"], "rank": 3, "activation": "gelu"},
                                 {"op": "concat_prompt", "prompt_len": 2}])");
  const ApetLayout l = layout_from_json(j, cfg);
  REQUIRE(l.size() == 4);
  CHECK(l[0].sites.size() == 12);
  CHECK(l[1].sites.size() == 4);
  CHECK(l[2].activation == Activation::Gelu);
  CHECK(layout_capacity(l, cfg) == 12 * 8 + 4 * 2 * 8 * 2 + 2 * 8 * 3 + 2 * 8);
  CHECK(layout_to_json(layout_from_json(layout_to_json(l), cfg)) == layout_to_json(l));
  CHECK_THROWS_AS(layout_from_json(Json::parse(R"([{"op": "glue", "sites": "bias"}])"), cfg), ConfigError);
  CHECK_THROWS_AS(layout_from_json(Json::parse(R"([{"op": "add"}])"), cfg), ConfigError);
  CHECK_THROWS_AS(layout_capacity(layout_from_json(Json::parse(R"([{"op": "add", "sites": "bias"}, {"op": "add", "sites": "bias"}])"), cfg), cfg),
                  ConfigError);
  const MaskSpec s = mask_spec_from_json(mask_spec_to_json(spec_of(MaskMode::Adjacent, 3, 4, 5, 9, MaskAxis::Columns)));
  CHECK(s.mode == MaskMode::Adjacent);
  CHECK(s.axis == MaskAxis::Columns);
  CHECK(s.budget == 5);
}
