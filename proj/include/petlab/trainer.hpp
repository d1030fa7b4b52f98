#pragma once

// min_θ L(M_(Φ,θ)(X), Y): forward through the backbone with the module's
// hooks, cross-entropy on class logits, and optimizer updates restricted to
// the module's tensors.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "petlab/checkpoint.hpp"
#include "petlab/optim.hpp"
#include "petlab/tasks.hpp"
#include "petlab/transformer.hpp"
#include "petlab/tuning.hpp"

namespace petlab {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 32;
  std::size_t max_steps = 2000;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t eval_every = 50;
  std::size_t log_every = 10;
  std::size_t eval_batch = 250;

  void validate() const;
  OptimizerConfig optimizer_config() const;
};

Json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});

struct ConvergenceCriterion {
  std::size_t patience = 5;
  double min_delta = 1e-3;

  void validate() const;
};

struct CurvePoint {
  std::size_t step = 0;
  double value = 0.0;
};

struct EvalPoint {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainReport {
  std::vector<CurvePoint> loss_curve;  // training loss
  std::vector<EvalPoint> eval_curve;   // validation
  std::optional<std::size_t> steps_to_convergence;
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  double final_metric = 0.0;  // test accuracy
  double final_loss = 0.0;    // test loss
  std::size_t trainable_count = 0;
  double wall_time = 0.0;  // seconds; not part of reproducible output
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

class Trainer {
 public:
  Trainer(Backbone& model, TuningModule& module, const TrainConfig& cfg);

  // One forward, backward and update; returns the batch loss.
  double step(const Batch& batch);
  std::size_t steps_done() const { return optimizer_.step_count(); }
  const Optimizer& optimizer() const { return optimizer_; }

 private:
  Backbone& model_;
  TuningModule& module_;
  DeltaHooks hooks_;
  Optimizer optimizer_;
};

// Argmax accuracy and mean cross-entropy; runs without recording a graph.
EvalResult evaluate(const Backbone& model, const DeltaHooks& hooks, const Dataset& split, std::size_t batch = 250);
EvalResult evaluate(const Backbone& model, const TuningModule& module, const Dataset& split,
                    std::size_t batch = 250);

// Trains on task.train with epoch-shuffled batches, evaluates on task.val
// every eval_every steps and stops once the validation loss has not improved
// by min_delta for `patience` evaluations. The final metric is on task.test.
TrainReport fit(Backbone& model, TuningModule& module, const SyntheticTask& task, const TrainConfig& cfg,
                const ConvergenceCriterion& criterion = {});

Json train_report_to_json(const TrainReport& report);
TrainReport train_report_from_json(const Json& j);

}  // namespace petlab
