#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "petlab/hooks.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

class Backbone;

// Anything that can be trained on top of a backbone: the tensors handed to
// the optimizer, the number of scalars that can actually move, and the hooks
// that splice the module into the forward pass.
class TuningModule {
 public:
  virtual ~TuningModule() = default;

  virtual std::string method() const = 0;
  virtual std::vector<NamedTensor> trainable_tensors() const = 0;
  virtual std::size_t trainable_count() const = 0;
  virtual DeltaHooks hooks() const = 0;
  // True when training is expected to change Φ.
  virtual bool trains_backbone() const { return false; }
};

// Sets requires_grad = false on every backbone parameter.
void freeze_backbone(Backbone& model);

// Full-parameter fine-tuning: θ is Φ itself.
class FullFineTune final : public TuningModule {
 public:
  explicit FullFineTune(Backbone& model);

  std::string method() const override { return "ft"; }
  std::vector<NamedTensor> trainable_tensors() const override;
  std::size_t trainable_count() const override;
  DeltaHooks hooks() const override { return {}; }
  bool trains_backbone() const override { return true; }

 private:
  Backbone* model_;
};

// Modules with no trainable scalars at all.
class NoTuning final : public TuningModule {
 public:
  std::string method() const override { return "none"; }
  std::vector<NamedTensor> trainable_tensors() const override { return {}; }
  std::size_t trainable_count() const override { return 0; }
  DeltaHooks hooks() const override { return {}; }
};

// Number of scalars with requires_grad = true across the module's tensors.
std::size_t count_trainable(const TuningModule& module);

}  // namespace petlab
