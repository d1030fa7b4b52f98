#include "petlab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "petlab/autodiff.hpp"
#include "petlab/errors.hpp"
#include "petlab/ops.hpp"
#include "petlab/seeding.hpp"

namespace petlab {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
  optimizer_config().validate();
}

OptimizerConfig TrainConfig::optimizer_config() const {
  return {optimizer, learning_rate, adam_beta1, adam_beta2, adam_eps};
}

Json train_config_to_json(const TrainConfig& c) {
  Json j;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["max_steps"] = c.max_steps;
  j["seed"] = c.seed;
  j["optimizer"] = optimizer_kind_name(c.optimizer);
  j["adam_betas"] = {c.adam_beta1, c.adam_beta2};
  j["adam_eps"] = c.adam_eps;
  j["eval_every"] = c.eval_every;
  j["log_every"] = c.log_every;
  j["eval_batch"] = c.eval_batch;
  return j;
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer")) c.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    if (j.contains("adam_betas")) {
      const auto b = j.at("adam_betas").get<std::vector<double>>();
      if (b.size() != 2) throw ConfigError("adam_betas needs two values");
      c.adam_beta1 = b[0];
      c.adam_beta2 = b[1];
    }
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.log_every = j.value("log_every", c.log_every);
    c.eval_batch = j.value("eval_batch", c.eval_batch);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

void ConvergenceCriterion::validate() const {
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be >= 0");
}

Trainer::Trainer(Backbone& model, TuningModule& module, const TrainConfig& cfg)
    : model_(model), module_(module), hooks_(module.hooks()), optimizer_(module.trainable_tensors(), cfg.optimizer_config()) {
  hooks_.validate(model_.config());
}

double Trainer::step(const Batch& batch) {
  if (batch.size() == 0) throw UsageError("train step on an empty batch");
  optimizer_.zero_grad();
  Tensor logits = model_.forward(batch.inputs, hooks_);
  Tensor loss = cross_entropy(logits, batch.labels);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw NumericError("non-finite loss " + std::to_string(value) + " at step " +
                       std::to_string(optimizer_.step_count() + 1) + " (method " + module_.method() + ", lr " +
                       std::to_string(optimizer_.config().learning_rate) + ")");
  }
  backward(loss);
  optimizer_.step();
  return value;
}

EvalResult evaluate(const Backbone& model, const DeltaHooks& hooks, const Dataset& split, std::size_t batch) {
  if (split.empty()) throw UsageError("evaluate on an empty split");
  NoGradGuard guard;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < split.size(); begin += batch) {
    const Batch b = split.slice(begin, begin + batch);
    Tensor logits = model.forward(b.inputs, hooks);
    const std::size_t C = logits.cols();
    loss_sum += cross_entropy(logits, b.labels).item() * static_cast<double>(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto row = logits.data().subspan(i * C, C);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == b.labels[i]) ++correct;
    }
  }
  const double n = static_cast<double>(split.size());
  return {static_cast<double>(correct) / n, loss_sum / n};
}

EvalResult evaluate(const Backbone& model, const TuningModule& module, const Dataset& split, std::size_t batch) {
  return evaluate(model, module.hooks(), split, batch);
}

TrainReport fit(Backbone& model, TuningModule& module, const SyntheticTask& task, const TrainConfig& cfg,
                const ConvergenceCriterion& criterion) {
  cfg.validate();
  criterion.validate();
  if (task.train.empty()) throw UsageError("fit on an empty training split");
  const auto t0 = std::chrono::steady_clock::now();

  TrainReport report;
  report.trainable_count = module.trainable_count();
  const DeltaHooks hooks = module.hooks();

  // a zero-budget module has tensors but nothing that can move
  const bool trainable = !module.trainable_tensors().empty() && module.trainable_count() > 0;
  std::optional<Trainer> trainer;
  if (trainable) trainer.emplace(model, module, cfg);

  Rng order_rng(mix_seed(cfg.seed, 0x0da7a));
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  double best_loss = INFINITY;
  std::size_t since_best = 0;
  double loss_acc = 0.0;
  std::size_t loss_n = 0;

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
      if (idx.size() == task.train.size()) break;
    }
    const Batch batch = task.train.gather(idx);
    double loss;
    if (trainer) {
      loss = trainer->step(batch);
    } else {
      // Nothing to update; the loss is still reported.
      NoGradGuard guard;
      loss = cross_entropy(model.forward(batch.inputs, hooks), batch.labels).item();
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    }
    loss_acc += loss;
    ++loss_n;
    report.steps_run = step;
    if (step % cfg.log_every == 0) {
      report.loss_curve.push_back({step, loss_acc / static_cast<double>(loss_n)});
      loss_acc = 0.0;
      loss_n = 0;
    }
    if (step % cfg.eval_every == 0) {
      const EvalResult ev = evaluate(model, hooks, task.val, cfg.eval_batch);
      report.eval_curve.push_back({step, ev.loss, ev.accuracy});
      if (ev.loss < best_loss - criterion.min_delta) {
        best_loss = ev.loss;
        report.best_step = step;
        since_best = 0;
      } else if (++since_best >= criterion.patience) {
        report.steps_to_convergence = report.best_step;
        break;
      }
    }
  }
  if (loss_n > 0) report.loss_curve.push_back({report.steps_run, loss_acc / static_cast<double>(loss_n)});

  const EvalResult test = evaluate(model, hooks, task.test, cfg.eval_batch);
  report.final_metric = test.accuracy;
  report.final_loss = test.loss;
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

Json train_report_to_json(const TrainReport& r) {
  Json j;
  Json loss = Json::array();
  for (const auto& p : r.loss_curve) loss.push_back({p.step, p.value});
  Json eval = Json::array();
  for (const auto& p : r.eval_curve) eval.push_back({p.step, p.loss, p.accuracy});
  j["final_metric"] = r.final_metric;
  j["final_loss"] = r.final_loss;
  j["trainable_count"] = r.trainable_count;
  j["steps_run"] = r.steps_run;
  j["best_step"] = r.best_step;
  j["steps_to_convergence"] = r.steps_to_convergence ? Json(*r.steps_to_convergence) : Json(nullptr);
  j["loss_curve"] = loss;
  j["eval_curve"] = eval;
  return j;
}

TrainReport train_report_from_json(const Json& j) {
  TrainReport r;
  try {
    r.final_metric = j.at("final_metric").get<double>();
    r.final_loss = j.at("final_loss").get<double>();
    r.trainable_count = j.at("trainable_count").get<std::size_t>();
    r.steps_run = j.at("steps_run").get<std::size_t>();
    r.best_step = j.at("best_step").get<std::size_t>();
    if (!j.at("steps_to_convergence").is_null()) r.steps_to_convergence = j.at("steps_to_convergence").get<std::size_t>();
    for (const auto& p : j.at("loss_curve")) r.loss_curve.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>()});
    for (const auto& p : j.at("eval_curve")) {
      r.eval_curve.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>(), p.at(2).get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train report: ") + e.what());
  }
  return r;
}

}  // namespace petlab
