#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "petlab/tensor.hpp"

namespace petlab {

enum class OptimizerKind { Adam, Sgd };

OptimizerKind parse_optimizer_kind(std::string_view name);
std::string_view optimizer_kind_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

// Updates exactly the tensors it was given. Entries whose gradient has always
// been zero keep zero moments and are never written, so masked-out weights
// stay bitwise identical.
class Optimizer {
 public:
  // Every tensor must require a gradient (UsageError otherwise).
  Optimizer(std::vector<NamedTensor> params, OptimizerConfig cfg);

  void step();
  void zero_grad();

  std::size_t step_count() const { return steps_; }
  const OptimizerConfig& config() const { return cfg_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  // Adam moment buffers (empty vectors for SGD).
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<NamedTensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

}  // namespace petlab
