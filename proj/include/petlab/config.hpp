#pragma once

// Experiment configuration file (JSON). Top-level keys:
//   model, backbone, task, train, convergence, presets, seed, jobs
//   method, budget, seeds          for `train`
//   sweep {methods, budgets, seeds, ft_reference, margin, epsilon}
//   ablate {budget, structures, seeds}
//   transfer {sources, targets, method, budget, seeds}
//   gradcheck {rounds, tolerance}
// Unknown top-level keys are rejected.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>

#include "petlab/checkpoint.hpp"
#include "petlab/harness.hpp"

namespace petlab {

struct GradcheckConfig {
  std::size_t rounds = 1;
  double tolerance = 1e-4;
};

struct ExperimentConfig {
  BackboneSpec backbone;
  TaskSpec task;
  TrainConfig train;
  ConvergenceCriterion convergence;
  LrPresets presets = default_lr_presets();
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  std::optional<TrainSpec> single;
  std::optional<SweepSpec> sweep;
  std::optional<AblationSpec> ablate;
  std::optional<TransferSpec> transfer;
  GradcheckConfig gradcheck;
};

// A budget is an integer, a reference method name (its default trainable
// count) or {"ratio": r} of |Φ|.
std::size_t parse_budget(const Json& j, const ModelConfig& cfg);

ExperimentConfig parse_config(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace petlab
