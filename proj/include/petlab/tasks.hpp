#pragma once

// Synthetic classification tasks standing in for natural-language datasets.
//
//   majority     label = the designated token (first_token + c) that occurs
//                most often; ties are never generated. Optional distractor
//                tokens repeat just as often but carry no label information
//   containment  label = whether the contiguous pattern
//                first_token, first_token+1, ... occurs; negatives may hold
//                an incomplete subset of the pattern tokens
//   modsum       label = (sum of tokens) mod num_classes
//
// Filler tokens come from [filler_start, vocab_size) minus the designated
// tokens. Splits are disjoint and
// labels are balanced exactly up to the remainder of size / num_classes.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "petlab/checkpoint.hpp"
#include "petlab/transformer.hpp"

namespace petlab {

struct Batch {
  std::vector<TokenSeq> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
};

struct Dataset {
  std::vector<TokenSeq> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
  Batch gather(const std::vector<std::size_t>& indices) const;
  Batch slice(std::size_t begin, std::size_t end) const;
};

enum class TaskFamily { Majority, Containment, ModSum };

TaskFamily parse_task_family(std::string_view name);
std::string_view task_family_name(TaskFamily family);

struct TaskSpec {
  std::string name = "majority";
  TaskFamily family = TaskFamily::Majority;
  std::size_t vocab_size = 640;
  std::size_t seq_len = 16;
  std::size_t num_classes = 4;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t test_size = 1000;
  std::uint64_t seed = 0;
  std::uint32_t first_token = 0;  // designated / pattern tokens start here
  std::uint32_t filler_start = 16;
  std::size_t pattern_len = 3;
  // Majority only: tokens distractor_token.. each repeated like a designated
  // token but independent of the label.
  std::uint32_t distractor_token = 0;
  std::size_t num_distractors = 0;

  void validate() const;
  // Designated or pattern tokens, which fillers never use.
  std::size_t reserved_tokens() const;
};

Json task_spec_to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const Json& j);

struct SyntheticTask {
  TaskSpec spec;
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<std::string> label_names;

  // Content hash over the spec and every split.
  std::uint64_t hash() const;
  // Label indices in the shared space (negative/false -> 0, positive/true -> 1).
  std::vector<std::size_t> unified_labels() const;
};

SyntheticTask gen_task(const TaskSpec& spec);

std::vector<std::string> task_label_names(const TaskSpec& spec);
// Maps a class name to the shared label space; ConfigError for unknown names.
std::size_t unified_label(std::string_view name);

// Random classifier accuracy for the task.
double random_baseline(const TaskSpec& spec);

}  // namespace petlab
