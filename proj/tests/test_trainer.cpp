#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "petlab/apet.hpp"
#include "petlab/autodiff.hpp"
#include "petlab/errors.hpp"
#include "petlab/optim.hpp"
#include "petlab/trainer.hpp"
#include "test_util.hpp"

using namespace petlab;
using testutil::tiny_config;

namespace {

SyntheticTask majority_task(std::size_t classes, std::size_t train = 160, std::uint64_t seed = 1) {
  TaskSpec s;
  s.vocab_size = 24;
  s.seq_len = 8;
  s.num_classes = classes;
  s.train_size = train;
  s.val_size = 60;
  s.test_size = 60;
  s.filler_start = 6;
  s.seed = seed;
  return gen_task(s);
}

TrainConfig quick(std::size_t steps, double lr = 3e-3) {
  TrainConfig c;
  c.max_steps = steps;
  c.learning_rate = lr;
  c.batch_size = 16;
  c.eval_every = 20;
  c.log_every = 10;
  return c;
}

void zero_head(Backbone& m) {
  for (const char* n : {"head.weight", "head.bias"}) {
    Tensor t = m.parameter(n);
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  }
}

}  // namespace

TEST_CASE("paper training defaults") {
  const TrainConfig c;
  CHECK(c.learning_rate == 3e-4);
  CHECK(c.batch_size == 32);
  CHECK(c.optimizer == OptimizerKind::Adam);
  CHECK(c.adam_beta1 == 0.9);
  CHECK(c.adam_beta2 == 0.999);
  CHECK(c.adam_eps == 1e-8);
  const ConvergenceCriterion cc;
  CHECK(cc.patience == 5);
  CHECK(cc.min_delta == 1e-3);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ConvergenceCriterion cc;
  cc.patience = 0;
  CHECK_THROWS_AS(cc.validate(), ConfigError);
  cc = {};
  cc.min_delta = -1;
  CHECK_THROWS_AS(cc.validate(), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(Json::parse(R"({"optimizer": "lion"})")), ConfigError);
  const TrainConfig back = train_config_from_json(train_config_to_json(quick(33, 0.01)));
  CHECK(back.max_steps == 33);
  CHECK(back.learning_rate == 0.01);
}

TEST_CASE("adam matches a hand-rolled update") {
  Tensor x = Tensor::from({2}, {0.5, -1.0}, true);
  OptimizerConfig oc;
  oc.learning_rate = 0.1;
  Optimizer opt({{"x", x}}, oc);
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {0.5, -1.0};
  for (int t = 1; t <= 4; ++t) {
    opt.zero_grad();
    backward(sum(hadamard(x, x)));
    opt.step();
    for (int i = 0; i < 2; ++i) {
      const double g = 2 * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(x.at(i) == doctest::Approx(ref[i]).epsilon(1e-14));
    }
  }
  CHECK(opt.step_count() == 4);
}

TEST_CASE("sgd step and zero-gradient skip") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  OptimizerConfig oc;
  oc.kind = OptimizerKind::Sgd;
  oc.learning_rate = 0.5;
  Optimizer opt({{"x", x}}, oc);
  auto g = x.mutable_grad();
  g[0] = 1.0;
  g[2] = -2.0;
  opt.step();
  CHECK(x.values() == std::vector<double>{0.5, 2.0, 4.0});
  CHECK_THROWS_AS(Optimizer({{"frozen", Tensor::zeros({2})}}, OptimizerConfig{}), UsageError);
  CHECK_THROWS_AS(parse_optimizer_kind("rmsprop"), ConfigError);
}

TEST_CASE("no trainable parameters: the loss never changes") {
  const ModelConfig cfg = tiny_config();
  Backbone bb(cfg, 1);
  freeze_backbone(bb);
  const SyntheticTask task = majority_task(3, 48);
  NoTuning none;
  TrainConfig tc = quick(30);
  tc.batch_size = task.train.size();
  tc.log_every = 1;
  const TrainReport r = fit(bb, none, task, tc, {});
  REQUIRE(r.loss_curve.size() >= 2);
  // Shuffling reorders the full batch, so only summation order differs.
  for (const auto& p : r.loss_curve) CHECK(std::fabs(p.value - r.loss_curve.front().value) < 1e-12);
  CHECK(r.trainable_count == 0);

  // Zero-budget APET: on a fixed batch the loss repeats bit for bit.
  ApetModule empty = build_apet(bb, default_apet_layout(cfg), 0, {});
  Trainer trainer(bb, empty, tc);
  const Batch batch = task.train.slice(0, 16);
  const double first = trainer.step(batch);
  for (int i = 0; i < 20; ++i) CHECK(trainer.step(batch) == first);
}

TEST_CASE("vanishing learning rate leaves parameters in place") {
  const ModelConfig cfg = tiny_config();
  Backbone bb(cfg, 2);
  FullFineTune ft(bb);
  const SyntheticTask task = majority_task(3);
  const auto before = bb.parameters();
  std::vector<std::vector<double>> values;
  for (const auto& p : before) values.push_back(p.tensor.values());
  TrainConfig tc = quick(1, 1e-20);
  Trainer trainer(bb, ft, tc);
  trainer.step(task.train.slice(0, 1));
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = 0; j < values[i].size(); ++j) CHECK(std::fabs(bb.parameters()[i].tensor.at(j) - values[i][j]) < 1e-15);
  }
}

TEST_CASE("train step errors") {
  const ModelConfig cfg = tiny_config();
  Backbone bb(cfg, 3);
  FullFineTune ft(bb);
  TrainConfig tc = quick(5, 1e300);
  tc.optimizer = OptimizerKind::Sgd;
  Trainer trainer(bb, ft, tc);
  CHECK_THROWS_AS(trainer.step(Batch{}), UsageError);
  const SyntheticTask task = majority_task(3);
  CHECK_THROWS_AS(
      [&] {
        for (int i = 0; i < 5; ++i) trainer.step(task.train.slice(0, 8));
      }(),
      NumericError);
}

TEST_CASE("loss falls on a separable task") {
  const ModelConfig cfg = tiny_config(2, 2);
  Backbone bb(cfg, 4);
  FullFineTune ft(bb);
  const SyntheticTask task = majority_task(2, 200);
  ConvergenceCriterion never;
  never.patience = 1000;
  const TrainReport r = fit(bb, ft, task, quick(200), never);
  REQUIRE(r.loss_curve.size() >= 4);
  const double first = r.loss_curve.front().value, last = r.loss_curve.back().value;
  CHECK(last < 0.5 * first);
  CHECK(r.final_metric > 0.8);
}

TEST_CASE("same seed gives identical reports") {
  const ModelConfig cfg = tiny_config();
  const SyntheticTask task = majority_task(3);
  auto run = [&](std::uint64_t seed) {
    Backbone bb(cfg, 5);
    freeze_backbone(bb);
    ApetOptions o;
    o.seed = seed;
    ApetModule m = build_apet(bb, default_apet_layout(cfg, 2), 100, o);
    TrainConfig tc = quick(60);
    tc.seed = seed;
    return train_report_to_json(fit(bb, m, task, tc, {})).dump();
  };
  CHECK(run(7) == run(7));
  CHECK(run(7) != run(8));
}

TEST_CASE("convergence rule") {
  const ModelConfig cfg = tiny_config();
  const SyntheticTask task = majority_task(3);
  for (std::size_t patience : {1, 2, 3}) {
    Backbone bb(cfg, 6);
    FullFineTune ft(bb);
    ConvergenceCriterion cc;
    cc.patience = patience;
    cc.min_delta = 0.0;
    TrainConfig tc = quick(2000, 1e-2);
    tc.eval_every = 10;
    const TrainReport r = fit(bb, ft, task, tc, cc);
    // Curves are ordered by step.
    for (std::size_t i = 1; i < r.eval_curve.size(); ++i) CHECK(r.eval_curve[i].step > r.eval_curve[i - 1].step);
    for (std::size_t i = 1; i < r.loss_curve.size(); ++i) CHECK(r.loss_curve[i].step > r.loss_curve[i - 1].step);
    REQUIRE(r.steps_to_convergence.has_value());
    CHECK(*r.steps_to_convergence <= tc.max_steps);
    CHECK(*r.steps_to_convergence == r.best_step);
    // The best step holds the smallest validation loss; training stopped
    // exactly `patience` evaluations later.
    double best = INFINITY;
    std::size_t best_step = 0;
    for (const auto& e : r.eval_curve) {
      if (e.loss < best) {
        best = e.loss;
        best_step = e.step;
      }
    }
    CHECK(best_step == r.best_step);
    CHECK(r.eval_curve.back().step == r.best_step + patience * tc.eval_every);
    CHECK(r.steps_run == r.eval_curve.back().step);
  }
  // Never firing leaves the field empty.
  Backbone bb(cfg, 6);
  FullFineTune ft(bb);
  ConvergenceCriterion patient;
  patient.patience = 1000;
  const TrainReport r = fit(bb, ft, task, quick(40), patient);
  CHECK_FALSE(r.steps_to_convergence.has_value());
  CHECK(r.steps_run == 40);
}

TEST_CASE("evaluation behaves like a pointwise metric") {
  const ModelConfig cfg = tiny_config(1, 4);
  Backbone bb(cfg, 7);
  const SyntheticTask task = majority_task(4, 160);
  const EvalResult base = evaluate(bb, DeltaHooks{}, task.test);
  CHECK(base.accuracy >= 0.0);
  CHECK(base.accuracy <= 1.0);
  // Permuted example order.
  Dataset shuffled = task.test;
  std::vector<std::size_t> idx(shuffled.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(70);
  std::shuffle(idx.begin(), idx.end(), rng);
  const Batch b = task.test.gather(idx);
  shuffled.inputs = b.inputs;
  shuffled.labels = b.labels;
  const EvalResult perm = evaluate(bb, DeltaHooks{}, shuffled, 7);
  CHECK(perm.accuracy == base.accuracy);
  CHECK(perm.loss == doctest::Approx(base.loss).epsilon(1e-12));
  CHECK_THROWS_AS(evaluate(bb, DeltaHooks{}, Dataset{}), UsageError);
}

TEST_CASE("random head accuracy averages to chance over label permutations") {
  const ModelConfig cfg = tiny_config(1, 4);
  TaskSpec s;
  s.vocab_size = 24;
  s.seq_len = 8;
  s.num_classes = 4;
  s.train_size = 40;
  s.val_size = 40;
  s.test_size = 1000;
  s.filler_start = 6;
  const SyntheticTask task = gen_task(s);
  Backbone bb(cfg, 8);
  std::vector<std::size_t> perm{0, 1, 2, 3};
  double total = 0.0;
  std::size_t n = 0;
  do {
    Dataset relabeled = task.test;
    for (auto& l : relabeled.labels) l = perm[l];
    total += evaluate(bb, DeltaHooks{}, relabeled).accuracy;
    ++n;
  } while (std::next_permutation(perm.begin(), perm.end()));
  CHECK(std::fabs(total / static_cast<double>(n) - 0.25) < 1e-12);
  // A zeroed head predicts one class: exactly the balanced share.
  zero_head(bb);
  const EvalResult z = evaluate(bb, DeltaHooks{}, task.test);
  CHECK(std::fabs(z.accuracy - 0.25) < 0.05);
  CHECK(std::fabs(z.loss - std::log(4.0)) < 1e-6);
}

TEST_CASE("initial loss with a zero head is ln C") {
  for (std::size_t classes : {2, 3, 5}) {
    const ModelConfig cfg = tiny_config(2, classes);
    Backbone bb(cfg, 9);
    zero_head(bb);
    const SyntheticTask task = majority_task(classes, 60);
    const Tensor loss = cross_entropy(bb.forward(task.train.inputs, {}), task.train.labels);
    CHECK(std::fabs(loss.item() - std::log(static_cast<double>(classes))) < 1e-6);
  }
}

TEST_CASE("memorising a small split gives perfect training accuracy") {
  const ModelConfig cfg = tiny_config(2, 2);
  Backbone bb(cfg, 10);
  FullFineTune ft(bb);
  const SyntheticTask task = majority_task(2, 24);
  ConvergenceCriterion never;
  never.patience = 1000;
  TrainConfig tc = quick(400, 1e-2);
  tc.batch_size = 24;
  fit(bb, ft, task, tc, never);
  CHECK(evaluate(bb, DeltaHooks{}, task.train).accuracy == 1.0);
}

TEST_CASE("report round trip") {
  const ModelConfig cfg = tiny_config();
  Backbone bb(cfg, 11);
  FullFineTune ft(bb);
  const TrainReport r = fit(bb, ft, majority_task(3), quick(50), {});
  const std::string text = train_report_to_json(r).dump();
  CHECK(train_report_to_json(train_report_from_json(Json::parse(text))).dump() == text);
}
