#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "petlab/tensor.hpp"

namespace petlab {

// Topologically ordered record of the nodes reachable from a loss. Built on
// demand from the graph that ops attach to their outputs; inputs always
// precede the nodes that consume them.
class GradTape {
 public:
  static GradTape record(const Tensor& loss);

  std::span<TensorNode* const> nodes() const { return nodes_; }
  // Calls every node's backward closure once, outputs before inputs.
  void replay() const;

 private:
  std::vector<TensorNode*> nodes_;
};

// Accumulates d(loss)/d(t) into every reachable tensor with requires_grad.
// Leaf gradients accumulate across calls until cleared with zero_grad().
void backward(const Tensor& loss);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // Tensors larger than this are checked on a seeded sample of coordinates.
  std::size_t max_coords = 64;
  std::uint64_t seed = 0;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are compared at this absolute scale.
  double abs_floor = 1e-6;
};

struct TensorGradCheck {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<TensorGradCheck> tensors;
  double max_rel_err = 0.0;
  bool passed = true;
};

double relative_error(double analytic, double numeric, double abs_floor);

// Compares backward() gradients of the scalar `f` against central
// differences (f(x+h) − f(x−h)) / 2h for each input tensor. `f` must rebuild
// its graph from the current input values on each call.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& inputs,
                           const GradCheckOptions& options = {});

// Same comparison against caller-supplied analytic gradients (one buffer per
// input, same layout as the input data).
GradCheckReport compare_gradients(const std::function<Tensor()>& f, const std::vector<NamedTensor>& inputs,
                                  const std::vector<std::vector<double>>& analytic,
                                  const GradCheckOptions& options = {});

}  // namespace petlab
