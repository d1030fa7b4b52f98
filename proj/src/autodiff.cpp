#include "petlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_set>
#include <utility>

#include "petlab/errors.hpp"

namespace petlab {

GradTape GradTape::record(const Tensor& loss) {
  GradTape tape;
  if (!loss.defined() || !loss.requires_grad()) return tape;
  std::unordered_set<const TensorNode*> seen;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* in = node->inputs[next++].get();
      if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void GradTape::replay() const {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward: undefined loss");
  if (loss.size() != 1) throw UsageError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  GradTape tape = GradTape::record(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  tape.replay();
}

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  Tensor out = f();
  if (out.size() != 1) throw UsageError("grad_check: function must return a scalar, got " + shape_str(out.shape()));
  return out.item();
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= max_coords) return idx;
  for (std::size_t i = 0; i < max_coords; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport compare_gradients(const std::function<Tensor()>& f, const std::vector<NamedTensor>& inputs,
                                  const std::vector<std::vector<double>>& analytic,
                                  const GradCheckOptions& options) {
  if (options.step <= 0) throw UsageError("grad_check: step must be positive");
  if (analytic.size() != inputs.size()) throw UsageError("grad_check: one analytic gradient per input required");

  const double base = eval_scalar(f);
  const double again = eval_scalar(f);
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw DiagnosticError("grad_check: function is not deterministic (" + std::to_string(base) + " vs " +
                          std::to_string(again) + ")");
  }

  Rng rng(options.seed);
  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor x = inputs[t].tensor;
    if (analytic[t].size() != x.size()) throw UsageError("grad_check: analytic gradient size mismatch");
    TensorGradCheck check;
    check.name = inputs[t].name;
    auto values = x.mutable_data();
    for (std::size_t i : pick_coords(x.size(), options.max_coords, rng)) {
      const double orig = values[i];
      values[i] = orig + options.step;
      const double fp = eval_scalar(f);
      values[i] = orig - options.step;
      const double fm = eval_scalar(f);
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * options.step);
      const double a = analytic[t][i];
      check.max_abs_err = std::max(check.max_abs_err, std::abs(a - numeric));
      check.max_rel_err = std::max(check.max_rel_err, relative_error(a, numeric, options.abs_floor));
      ++check.coords_checked;
    }
    check.passed = check.max_rel_err < options.tolerance;
    report.max_rel_err = std::max(report.max_rel_err, check.max_rel_err);
    report.passed = report.passed && check.passed;
    report.tensors.push_back(std::move(check));
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& inputs,
                           const GradCheckOptions& options) {
  for (const auto& in : inputs) {
    if (!in.tensor.requires_grad()) throw UsageError("grad_check: input '" + in.name + "' does not require grad");
    Tensor t = in.tensor;
    t.zero_grad();
  }
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    analytic.push_back(in.tensor.grad());
    Tensor t = in.tensor;
    t.zero_grad();
  }
  return compare_gradients(f, inputs, analytic, options);
}

}  // namespace petlab

