#pragma once

// Experiment drivers: single fits, the equal-budget structure ablation, the
// trainable-budget sweep with threshold extraction, and zero-shot transfer.
// Every fit is a keyed, self-contained cell: it clones the reference
// backbone, seeds its own streams from (global seed, cell key) and shares
// nothing mutable, so cells may run in parallel in any order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "petlab/apet.hpp"
#include "petlab/checkpoint.hpp"
#include "petlab/pet.hpp"
#include "petlab/tasks.hpp"
#include "petlab/trainer.hpp"

namespace petlab {

// ---------------------------------------------------------------- methods

enum class MethodKind { FullFT, None, Pet, Apet };

struct MethodSpec {
  std::string name;  // output label, unique within an experiment
  MethodKind kind = MethodKind::Apet;
  PetConfig pet;                       // Pet
  MaskMode mode = MaskMode::Discrete;  // Apet, and Pet under a budget
  MaskAxis axis = MaskAxis::Rows;
  ApetLayout layout;  // Apet; empty means default_apet_layout
  std::optional<double> learning_rate;

  // "dense", "adjacent", "discrete" or "none".
  std::string structure(bool budgeted) const;
  std::vector<std::string> insertion_ops(const ModelConfig& cfg) const;
};

// Accepts a name ("ft", "none", "prompt", "bitfit", "lora", "adapter",
// "apet-adjacent", "apet-discrete") or an object with "method" plus options.
MethodSpec method_from_json(const Json& j, const ModelConfig& cfg);
Json method_to_json(const MethodSpec& m);

// Learning-rate presets by method name; the prompt preset is 3e-2.
using LrPresets = std::map<std::string, double>;
LrPresets default_lr_presets();

// Layout whose hosts are exactly the method's weights (adapter biases aside).
ApetLayout pet_layout(const PetConfig& cfg, const ModelConfig& model);
// Most parameters the method can train.
std::size_t method_capacity(const MethodSpec& m, const ModelConfig& model);

// PET methods with a budget become their own layout under masks of that
// budget; without one they attach densely. FT ignores budgets, "none" has
// no parameters. The backbone is frozen unless the method is FT.
std::unique_ptr<TuningModule> build_module(Backbone& model, const MethodSpec& m, std::optional<std::size_t> budget,
                                           std::uint64_t seed, std::size_t input_len);

// ---------------------------------------------------------------- backbone

struct BackboneSpec {
  ModelConfig model;
  std::uint64_t seed = 1234;
  std::string checkpoint;  // load instead of initialising when set
  // Optional full fine-tune on a separate task before freezing.
  std::optional<TaskSpec> pretrain_task;
  TrainConfig pretrain;
};

Json backbone_spec_to_json(const BackboneSpec& s);
BackboneSpec backbone_spec_from_json(const Json& j);
// Initialised (and optionally pretrained) backbone with Φ frozen.
Backbone make_backbone(const BackboneSpec& spec);

// ---------------------------------------------------------------- runs

struct RunRecord;

struct Context {
  const Backbone* backbone = nullptr;
  TrainConfig train;
  ConvergenceCriterion criterion;
  LrPresets presets = default_lr_presets();
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  // Called with every batch of finished runs before failures are raised.
  std::function<void(const std::vector<RunRecord>&)> on_runs;
};

struct RunSpec {
  std::string experiment;
  std::string group;
  MethodSpec method;
  std::optional<std::size_t> budget;
  std::size_t replicate = 0;
  const SyntheticTask* task = nullptr;
  // Extra splits evaluated with the trained module (transfer targets).
  std::vector<const SyntheticTask*> eval_tasks;

  std::string key() const;
};

struct RunRecord {
  std::string key;
  std::string experiment;
  std::string group;
  std::string method;
  std::string method_kind;
  std::string structure;
  std::vector<std::string> insertion_ops;
  std::optional<std::size_t> budget;
  std::size_t trainable_count = 0;
  double budget_ratio = 0.0;  // trainable_count / |Φ|
  std::size_t replicate = 0;
  std::uint64_t run_seed = 0;
  std::string task;
  std::string task_family;
  std::string task_hash;
  std::string backbone_hash;  // Φ before the fit
  std::string backbone_hash_after;
  std::string mask_hash;  // APET only
  double learning_rate = 0.0;
  std::string status = "ok";  // ok | error
  std::string error;
  TrainReport report;
  std::map<std::string, double> transfer;  // target task -> test accuracy
};

Json run_record_to_json(const RunRecord& r);
RunRecord run_record_from_json(const Json& j);

// Trains one cell. Errors are caught into the record.
RunRecord run_cell(const Context& ctx, const RunSpec& spec);
// Runs cells on ctx.jobs threads; results come back sorted by key.
std::vector<RunRecord> run_cells(const Context& ctx, const std::vector<RunSpec>& specs);

// ---------------------------------------------------------------- thresholds

struct CurveRow {
  std::size_t budget = 0;
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
  double ratio = 0.0;
  bool feasible = true;
};

struct ThresholdReport {
  std::string method;
  std::optional<std::size_t> low_threshold;
  std::optional<std::size_t> high_threshold;
  double random_baseline = 0.0;
  double ft_performance = 0.0;
  std::vector<CurveRow> curve;
};

// low = first budget whose mean ≥ random + margin, high = first budget
// whose mean ≥ ft − epsilon. Infeasible rows are skipped.
std::pair<std::optional<std::size_t>, std::optional<std::size_t>> detect_thresholds(
    const std::vector<CurveRow>& curve, double random_baseline, double ft_performance, double margin = 0.05,
    double epsilon = 0.02);

Json threshold_report_to_json(const ThresholdReport& t);

// ---------------------------------------------------------------- drivers

struct TrainSpec {
  MethodSpec method;
  std::optional<std::size_t> budget;
  std::size_t seeds = 1;
  TaskSpec task;
};

struct TrainResult {
  std::vector<RunRecord> runs;
};

TrainResult run_train(const Context& ctx, const TrainSpec& spec);

struct SweepSpec {
  std::vector<MethodSpec> methods;
  std::vector<std::size_t> budgets;
  std::size_t seeds = 3;
  TaskSpec task;
  std::optional<double> ft_reference;  // computed from FT runs when absent
  double margin = 0.05;
  double epsilon = 0.02;

  void validate() const;
};

// Geometric (×factor) grid from `start` up to `cap`, always ending at cap,
// with 0 first when include_zero.
std::vector<std::size_t> geometric_budgets(std::size_t start, double factor, std::size_t cap, bool include_zero);

struct SweepResult {
  std::vector<RunRecord> runs;
  std::vector<ThresholdReport> thresholds;
  double random_baseline = 0.0;
  double ft_performance = 0.0;
};

SweepResult run_budget_sweep(const Context& ctx, const SweepSpec& spec);

struct AblationSpec {
  std::size_t budget = 0;
  std::vector<MethodSpec> structures;
  std::size_t seeds = 3;
  TaskSpec task;
};

struct AblationRow {
  std::string method;
  std::string structure;
  std::size_t budget = 0;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
  double steps_mean = 0.0;  // over seeds whose criterion fired
  double steps_std = 0.0;
  std::size_t converged = 0;
};

struct AblationResult {
  std::vector<RunRecord> runs;
  std::vector<AblationRow> rows;
};

// BudgetError when a structure cannot host exactly `budget` parameters.
AblationResult run_structure_ablation(const Context& ctx, const AblationSpec& spec);

struct TransferSpec {
  std::vector<TaskSpec> sources;
  std::vector<TaskSpec> targets;
  MethodSpec method;
  std::optional<std::size_t> budget;
  std::size_t seeds = 1;
};

struct TransferMatrix {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::vector<std::string> source_families;
  std::vector<std::string> target_families;
  std::vector<std::vector<double>> relative;  // [source][target], seed mean
  std::vector<double> original;               // source test accuracy, seed mean
  double same_family_mean = 0.0;              // off-diagonal pairs only; NaN if none
  double cross_family_mean = 0.0;
};

struct TransferResult {
  std::vector<RunRecord> runs;
  TransferMatrix matrix;
};

// ConfigError when the tasks do not share one unified label space.
TransferResult run_transfer(const Context& ctx, const TransferSpec& spec);

}  // namespace petlab
