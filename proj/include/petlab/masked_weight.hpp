#pragma once

#include <cstddef>

#include "petlab/tensor.hpp"

namespace petlab {

// A dense weight W paired with a fixed binary mask m. The weight that enters
// the model is Ŵ = W ⊙ m, so d(loss)/dW is exactly zero wherever m = 0 and
// those entries of W never move under a gradient step.
class MaskedWeight {
 public:
  MaskedWeight() = default;
  // `mask` must have W's shape and contain only 0 and 1.
  MaskedWeight(Tensor weight, Tensor mask);

  const Tensor& weight() const { return weight_; }
  Tensor& weight() { return weight_; }
  const Tensor& mask() const { return mask_; }
  std::size_t trainable_count() const { return trainable_count_; }

  // Ŵ, recorded on the graph when W requires a gradient.
  Tensor effective() const;

 private:
  Tensor weight_;
  Tensor mask_;
  std::size_t trainable_count_ = 0;
};

}  // namespace petlab
