#include "petlab/masked_weight.hpp"

#include "petlab/errors.hpp"
#include "petlab/ops.hpp"

namespace petlab {

MaskedWeight::MaskedWeight(Tensor weight, Tensor mask) : weight_(std::move(weight)), mask_(std::move(mask)) {
  if (weight_.shape() != mask_.shape()) {
    throw DimensionError("MaskedWeight: mask " + shape_str(mask_.shape()) + " does not match weight " +
                         shape_str(weight_.shape()));
  }
  mask_.set_requires_grad(false);
  for (double m : mask_.data()) {
    if (m != 0.0 && m != 1.0) throw ConfigError("MaskedWeight: mask entries must be exactly 0 or 1");
    if (m == 1.0) ++trainable_count_;
  }
}

Tensor MaskedWeight::effective() const { return hadamard(weight_, mask_); }

}  // namespace petlab
