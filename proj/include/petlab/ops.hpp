#pragma once

// Differentiable primitives. Every op records a backward closure only when at
// least one input requires a gradient, so frozen-only computations build no
// graph.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "petlab/tensor.hpp"

namespace petlab {

inline constexpr double kLayerNormEps = 1e-5;

enum class Activation { Relu, Gelu, Sigmoid };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind);

// Scalar forms, shared with tests and the adapter bottleneck.
double activate_value(Activation kind, double x);
double activate_derivative(Activation kind, double x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
// a[p×q] + bias broadcast over rows; bias has shape [q] or [1×q].
Tensor add_bias(const Tensor& a, const Tensor& bias);
// Repeats a [q] or [1×q] row `rows` times.
Tensor broadcast_rows(const Tensor& row, std::size_t rows);
Tensor scale(const Tensor& a, double factor);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor activate(const Tensor& a, Activation kind);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);
Tensor sum(const Tensor& a);

// Same values under a new shape of equal size.
Tensor reshape(const Tensor& a, Shape shape);

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Gathers rows of `table` ([V×d]) for each id.
Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids);

// x holds `segments` stacked sequences of equal length; inserts the rows of
// `prefix` in front of each sequence.
Tensor prepend_rows(const Tensor& x, const Tensor& prefix, std::size_t segments);

// Per-segment mean of rows [skip, segment_len) -> [segments × d].
Tensor segment_mean(const Tensor& x, std::size_t segments, std::size_t skip);

// Scaled dot-product attention applied independently to each segment and to
// each of `heads` column blocks of q, k, v ([segments·T × d]). Output is the
// head outputs concatenated along columns, same shape as q.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t segments, std::size_t heads);

// Mean cross-entropy of logits [B×C] against class labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace petlab
