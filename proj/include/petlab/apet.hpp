#pragma once

// Masked parameter-efficient tuning. Every trainable weight is Ŵ = W ⊙ m with
// a fixed binary mask m, spliced into the backbone by one of three
// insertions:
//   Add            Δh = Ŵ₁                                  (row offset)
//   Concatenate    prompt form: rows Ŵ₂ prepended to the input
//                  low-rank form: Δh = α · h_in Ŵ₃ Ŵ₄
//   Plug-in        Δh = σ(f(h_in) Ŵ₅) Ŵ₆
// A global budget N is split across all hosted weights, and the masks place
// exactly N trainable entries either as contiguous runs (adjacent) or
// uniformly at random (discrete).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "petlab/checkpoint.hpp"
#include "petlab/masked_weight.hpp"
#include "petlab/pet.hpp"
#include "petlab/transformer.hpp"
#include "petlab/tuning.hpp"

namespace petlab {

enum class MaskMode { Adjacent, Discrete };
enum class MaskAxis { Rows, Columns };

MaskMode parse_mask_mode(std::string_view name);
std::string_view mask_mode_name(MaskMode mode);
MaskAxis parse_mask_axis(std::string_view name);
std::string_view mask_axis_name(MaskAxis axis);

struct MaskSpec {
  MaskMode mode = MaskMode::Discrete;
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  MaskAxis axis = MaskAxis::Rows;

  void validate() const;
};

// The budget ones fill whole lines (rows or columns) consecutively from a
// seeded starting line, followed by one contiguous partial line at a seeded
// offset.
Tensor gen_adjacent_mask(const MaskSpec& spec);
// budget cells drawn uniformly without replacement.
Tensor gen_discrete_mask(const MaskSpec& spec);
Tensor gen_mask(const MaskSpec& spec);

enum class InsertionKind { Add, ConcatPrompt, ConcatLowRank, PlugIn };

InsertionKind parse_insertion_kind(std::string_view name);
std::string_view insertion_kind_name(InsertionKind kind);

// ---------------------------------------------------------------- budget

struct BudgetSite {
  std::string name;
  Shape host_shape;
};

struct BudgetAllocation {
  std::string name;
  Shape host_shape;
  std::size_t count = 0;
};

struct BudgetPlan {
  std::size_t total = 0;
  std::vector<BudgetAllocation> allocations;

  std::size_t capacity() const;
  void validate() const;
};

// Proportional to host capacity with largest-remainder rounding; remainder
// ties go to the earlier site. The counts sum to `total` exactly.
BudgetPlan budget_allocate(std::size_t total, const std::vector<BudgetSite>& sites);

Json budget_plan_to_json(const BudgetPlan& plan);
BudgetPlan budget_plan_from_json(const Json& j);
Json mask_spec_to_json(const MaskSpec& spec);
MaskSpec mask_spec_from_json(const Json& j);

// ---------------------------------------------------------------- insertions

// `width` is the hidden-state width of the target site.
DeltaFn apet_add(const MaskedWeight& offset, std::size_t width);
PrefixFn apet_concatenate_prompt(const MaskedWeight& prompt);
DeltaFn apet_concatenate_lowrank(const MaskedWeight& down, const MaskedWeight& up, double alpha);
DeltaFn apet_plugin(const MaskedWeight& down, const MaskedWeight& up, Activation act);

struct LayoutEntry {
  InsertionKind op = InsertionKind::Add;
  std::vector<std::string> sites;  // unused by the prompt form
  std::size_t rank = kDefaultLoraRank;  // low-rank inner size or plug-in bottleneck
  double alpha = kDefaultLoraAlpha;
  std::size_t prompt_len = 4;
  Activation activation = Activation::Relu;
};

using ApetLayout = std::vector<LayoutEntry>;

// Add at every bias site plus low-rank concatenation at the query and value
// projections of every block.
ApetLayout default_apet_layout(const ModelConfig& cfg, std::size_t rank = kDefaultLoraRank,
                               double alpha = kDefaultLoraAlpha);
Json layout_to_json(const ApetLayout& layout);
ApetLayout layout_from_json(const Json& j, const ModelConfig& cfg);

// Host weights a layout creates, in allocation order.
std::vector<BudgetSite> layout_hosts(const ApetLayout& layout, const ModelConfig& cfg);
std::size_t layout_capacity(const ApetLayout& layout, const ModelConfig& cfg);

struct NamedMaskedWeight {
  std::string name;
  MaskedWeight weight;
};

struct ApetInsertion {
  std::string site;  // empty for the prompt form
  InsertionKind op = InsertionKind::Add;
  std::vector<std::size_t> weights;
  double alpha = 1.0;
  Activation activation = Activation::Relu;
};

class ApetModule final : public TuningModule {
 public:
  ApetModule(std::vector<NamedMaskedWeight> weights, std::vector<ApetInsertion> insertions, std::size_t d_model);

  const std::vector<NamedMaskedWeight>& masked_weights() const { return weights_; }
  const std::vector<ApetInsertion>& insertions() const { return insertions_; }
  std::size_t total_budget() const { return total_budget_; }
  std::size_t d_model() const { return d_model_; }
  std::uint64_t mask_hash() const;

  std::string method() const override { return "apet"; }
  std::vector<NamedTensor> trainable_tensors() const override;
  std::size_t trainable_count() const override { return total_budget_; }
  DeltaHooks hooks() const override;

 private:
  std::vector<NamedMaskedWeight> weights_;
  std::vector<ApetInsertion> insertions_;
  std::size_t d_model_;
  std::size_t total_budget_ = 0;
};

struct ApetOptions {
  MaskMode mode = MaskMode::Discrete;
  MaskAxis axis = MaskAxis::Rows;
  std::uint64_t seed = 0;
  std::size_t input_len = 0;  // for the prompt form's length check
};

// Allocates `total_budget` over the layout's hosts, generates one mask per
// host and initialises W (zeros for offsets and up projections, N(0, 0.02)
// for down projections, N(0, 1) for prompt rows).
ApetModule build_apet(const Backbone& model, const ApetLayout& layout, std::size_t total_budget,
                      const ApetOptions& options);

// All-ones masks around the given PET module's weights; forwards are equal.
ApetModule reduce_to_pet(const PetModule& pet);
ApetModule reduce_to_pet(const Backbone& model, const PetConfig& cfg, std::uint64_t seed, std::size_t input_len);

Json apet_module_to_json(const ApetModule& module);
ApetModule apet_module_from_json(const Json& doc);
void save_apet_module(const ApetModule& module, const std::filesystem::path& path);
ApetModule load_apet_module(const std::filesystem::path& path);

}  // namespace petlab
