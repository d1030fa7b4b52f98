#include "petlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "petlab/errors.hpp"
#include "petlab/kernels.hpp"

namespace petlab {
namespace {

Tensor make_op(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
               BackwardFn backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (!NoGradGuard::active())
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::vector<double>* grad_of(TensorNode& out, std::size_t i) {
  TensorNode& in = *out.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

void require_matrix(const Tensor& a, std::string_view op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(a.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Accepts [q] or [1×q].
std::size_t row_vector_len(const Tensor& t, std::string_view op) {
  const auto& s = t.shape();
  if (s.size() == 1) return s[0];
  if (s.size() == 2 && s[0] == 1) return s[1];
  throw DimensionError(std::string(op) + " expects a row vector, got " + shape_str(s));
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::Relu;
  if (name == "gelu") return Activation::Gelu;
  if (name == "sigmoid") return Activation::Sigmoid;
  throw ConfigError("unknown nonlinearity '" + std::string(name) + "' (expected relu, gelu or sigmoid)");
}

std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::Relu:
      return "relu";
    case Activation::Gelu:
      return "gelu";
    case Activation::Sigmoid:
      return "sigmoid";
  }
  return "?";
}

double activate_value(Activation kind, double x) {
  switch (kind) {
    case Activation::Relu:
      return x > 0 ? x : 0.0;
    case Activation::Gelu:
      return gelu(x);
    case Activation::Sigmoid:
      return sigmoid(x);
  }
  return x;
}

double activate_derivative(Activation kind, double x) {
  switch (kind) {
    case Activation::Relu:
      return x > 0 ? 1.0 : 0.0;
    case Activation::Gelu:
      return gelu_grad(x);
    case Activation::Sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::gemm_nn(a.data(), b.data(), out, {m, k, n}, false);
  return make_op({m, n}, std::move(out), {&a, &b}, [m, k, n](TensorNode& o) {
    const auto& A = o.inputs[0]->data;
    const auto& B = o.inputs[1]->data;
    if (auto* ga = grad_of(o, 0)) kernels::gemm_nt(o.grad, B, *ga, {m, n, k}, true);
    if (auto* gb = grad_of(o, 1)) kernels::gemm_tn(A, o.grad, *gb, {k, m, n}, true);
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i * c + j);
  return make_op({c, r}, std::move(out), {&a}, [r, c](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_op(a.shape(), std::move(out), {&a, &b}, [](TensorNode& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = grad_of(o, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_bias");
  const std::size_t r = a.rows(), c = a.cols();
  if (row_vector_len(bias, "add_bias") != c) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(a.shape()));
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.at(i * c + j) + bias.at(j);
  return make_op(a.shape(), std::move(out), {&a, &bias}, [r, c](TensorNode& o) {
    if (auto* ga = grad_of(o, 0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += o.grad[i];
    if (auto* gb = grad_of(o, 1))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += o.grad[i * c + j];
  });
}

Tensor broadcast_rows(const Tensor& row, std::size_t rows) {
  const std::size_t c = row_vector_len(row, "broadcast_rows");
  if (rows == 0) throw DimensionError("broadcast_rows: zero rows");
  std::vector<double> out(rows * c);
  for (std::size_t i = 0; i < rows; ++i) std::copy(row.data().begin(), row.data().end(), out.begin() + i * c);
  return make_op({rows, c}, std::move(out), {&row}, [rows, c](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * factor;
  return make_op(a.shape(), std::move(out), {&a}, [factor](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same(a, b, "hadamard");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_op(a.shape(), std::move(out), {&a, &b}, [](TensorNode& o) {
    const auto& A = o.inputs[0]->data;
    const auto& B = o.inputs[1]->data;
    if (auto* ga = grad_of(o, 0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += o.grad[i] * B[i];
    if (auto* gb = grad_of(o, 1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += o.grad[i] * A[i];
  });
}

Tensor activate(const Tensor& a, Activation kind) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate_value(kind, a.at(i));
  return make_op(a.shape(), std::move(out), {&a}, [kind](TensorNode& o) {
    const auto& x = o.inputs[0]->data;
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * activate_derivative(kind, x[i]);
  });
}

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * c;
    double* y = out.data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  return make_op(a.shape(), std::move(out), {&a}, [r, c](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = o.data.data() + i * c;
      const double* dy = o.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(a, "layer_norm");
  const std::size_t r = a.rows(), d = a.cols();
  if (row_vector_len(gain, "layer_norm") != d || row_vector_len(bias, "layer_norm") != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match " + shape_str(a.shape()));
  }
  std::vector<double> out(r * d), xhat(r * d), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x[j] - mean) * inv_std[i];
      out[i * d + j] = gain.at(j) * xhat[i * d + j] + bias.at(j);
    }
  }
  return make_op(a.shape(), std::move(out), {&a, &gain, &bias},
                 [r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& o) {
                   const auto& gamma = o.inputs[1]->data;
                   auto* gx = grad_of(o, 0);
                   auto* gg = grad_of(o, 1);
                   auto* gb = grad_of(o, 2);
                   std::vector<double> dxhat(d);
                   for (std::size_t i = 0; i < r; ++i) {
                     const double* dy = o.grad.data() + i * d;
                     const double* xh = xhat.data() + i * d;
                     if (gg)
                       for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * xh[j];
                     if (gb)
                       for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[j];
                     if (!gx) continue;
                     double mean_dx = 0.0, mean_dx_xh = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       dxhat[j] = dy[j] * gamma[j];
                       mean_dx += dxhat[j];
                       mean_dx_xh += dxhat[j] * xh[j];
                     }
                     mean_dx /= static_cast<double>(d);
                     mean_dx_xh /= static_cast<double>(d);
                     for (std::size_t j = 0; j < d; ++j)
                       (*gx)[i * d + j] += inv_std[i] * (dxhat[j] - mean_dx - xh[j] * mean_dx_xh);
                   }
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op({1}, {s}, {&a}, [](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op(std::move(shape), std::move(out), {&a}, [](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_cols");
  const std::size_t r = a.rows(), c = a.cols();
  if (count == 0 || start + count > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.at(i * c + start + j);
  return make_op({r, count}, std::move(out), {&a}, [r, c, start, count](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + start + j] += o.grad[i * count + j];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: row count mismatch " + shape_str(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = parts[k].at(i * widths[k] + j);
    off += widths[k];
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = {r, total};
  node->data = std::move(out);
  bool needs = false;
  if (!NoGradGuard::active())
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->inputs.push_back(p.node_ptr());
    node->backward = [r, total, widths](TensorNode& o) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (auto* g = grad_of(o, k))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) (*g)[i * widths[k] + j] += o.grad[i * total + off + j];
        off += widths[k];
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_matrix(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw InputError("embedding: empty id sequence");
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw InputError("token id " + std::to_string(ids[i]) + " out of vocabulary of size " + std::to_string(v));
    }
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<std::uint32_t> idx(ids.begin(), ids.end());
  return make_op({ids.size(), d}, std::move(out), {&table}, [d, idx = std::move(idx)](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += o.grad[i * d + j];
  });
}

Tensor prepend_rows(const Tensor& x, const Tensor& prefix, std::size_t segments) {
  require_matrix(x, "prepend_rows");
  require_matrix(prefix, "prepend_rows");
  const std::size_t d = x.cols();
  if (prefix.cols() != d) {
    throw DimensionError("prepend_rows: prefix " + shape_str(prefix.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (segments == 0 || x.rows() % segments != 0) {
    throw DimensionError("prepend_rows: " + std::to_string(x.rows()) + " rows do not split into " +
                         std::to_string(segments) + " segments");
  }
  const std::size_t t = x.rows() / segments, p = prefix.rows(), w = p + t;
  std::vector<double> out(segments * w * d);
  for (std::size_t s = 0; s < segments; ++s) {
    std::copy(prefix.data().begin(), prefix.data().end(), out.begin() + s * w * d);
    std::copy_n(x.data().begin() + s * t * d, t * d, out.begin() + (s * w + p) * d);
  }
  return make_op({segments * w, d}, std::move(out), {&x, &prefix}, [segments, t, p, w, d](TensorNode& o) {
    if (auto* gx = grad_of(o, 0))
      for (std::size_t s = 0; s < segments; ++s)
        for (std::size_t i = 0; i < t * d; ++i) (*gx)[s * t * d + i] += o.grad[(s * w + p) * d + i];
    if (auto* gp = grad_of(o, 1))
      for (std::size_t s = 0; s < segments; ++s)
        for (std::size_t i = 0; i < p * d; ++i) (*gp)[i] += o.grad[s * w * d + i];
  });
}

Tensor segment_mean(const Tensor& x, std::size_t segments, std::size_t skip) {
  require_matrix(x, "segment_mean");
  if (segments == 0 || x.rows() % segments != 0) {
    throw DimensionError("segment_mean: " + std::to_string(x.rows()) + " rows do not split into " +
                         std::to_string(segments) + " segments");
  }
  const std::size_t t = x.rows() / segments, d = x.cols();
  if (skip >= t) throw DimensionError("segment_mean: skip leaves no rows to pool");
  const double inv = 1.0 / static_cast<double>(t - skip);
  std::vector<double> out(segments * d, 0.0);
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t i = skip; i < t; ++i)
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += x.at((s * t + i) * d + j);
    for (std::size_t j = 0; j < d; ++j) out[s * d + j] *= inv;
  }
  return make_op({segments, d}, std::move(out), {&x}, [segments, t, d, skip, inv](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    for (std::size_t s = 0; s < segments; ++s)
      for (std::size_t i = skip; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) g[(s * t + i) * d + j] += o.grad[s * d + j] * inv;
  });
}

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t segments, std::size_t heads) {
  require_matrix(q, "attention_core");
  require_same(q, k, "attention_core");
  require_same(q, v, "attention_core");
  const std::size_t rows = q.rows(), d = q.cols();
  if (segments == 0 || rows % segments != 0) throw DimensionError("attention_core: rows do not split into segments");
  if (heads == 0 || d % heads != 0) throw DimensionError("attention_core: width not divisible by head count");
  const std::size_t t = rows / segments, dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(segments * heads * t * t);
  std::vector<double> out(rows * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (s * heads + h) * t * t;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < t; ++i) {
        const double* qi = Q + (s * t + i) * d + c0;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < t; ++j) {
          const double* kj = K + (s * t + j) * d + c0;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          P[i * t + j] = dot * sc;
          mx = std::max(mx, P[i * t + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
          P[i * t + j] = std::exp(P[i * t + j] - mx);
          z += P[i * t + j];
        }
        for (std::size_t j = 0; j < t; ++j) P[i * t + j] /= z;
        double* oi = out.data() + (s * t + i) * d + c0;
        for (std::size_t j = 0; j < t; ++j) {
          const double pij = P[i * t + j];
          const double* vj = V + (s * t + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  return make_op(
      q.shape(), std::move(out), {&q, &k, &v},
      [segments, heads, t, d, dh, sc, probs = std::move(probs)](TensorNode& o) {
        const double* Q = o.inputs[0]->data.data();
        const double* K = o.inputs[1]->data.data();
        const double* V = o.inputs[2]->data.data();
        auto* gq = grad_of(o, 0);
        auto* gk = grad_of(o, 1);
        auto* gv = grad_of(o, 2);
        std::vector<double> dp(t * t);
        for (std::size_t s = 0; s < segments; ++s) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = probs.data() + (s * heads + h) * t * t;
            const std::size_t c0 = h * dh;
            // dP = dO · Vᵀ ; dV = Pᵀ · dO
            for (std::size_t i = 0; i < t; ++i) {
              const double* doi = o.grad.data() + (s * t + i) * d + c0;
              for (std::size_t j = 0; j < t; ++j) {
                const double* vj = V + (s * t + j) * d + c0;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                dp[i * t + j] = acc;
              }
            }
            if (gv) {
              for (std::size_t j = 0; j < t; ++j) {
                double* gvj = gv->data() + (s * t + j) * d + c0;
                for (std::size_t i = 0; i < t; ++i) {
                  const double pij = P[i * t + j];
                  const double* doi = o.grad.data() + (s * t + i) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += pij * doi[c];
                }
              }
            }
            if (!gq && !gk) continue;
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then scaled
            for (std::size_t i = 0; i < t; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < t; ++j) dot += dp[i * t + j] * P[i * t + j];
              for (std::size_t j = 0; j < t; ++j) dp[i * t + j] = P[i * t + j] * (dp[i * t + j] - dot) * sc;
            }
            if (gq) {
              for (std::size_t i = 0; i < t; ++i) {
                double* gqi = gq->data() + (s * t + i) * d + c0;
                for (std::size_t j = 0; j < t; ++j) {
                  const double ds = dp[i * t + j];
                  const double* kj = K + (s * t + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
              }
            }
            if (gk) {
              for (std::size_t j = 0; j < t; ++j) {
                double* gkj = gk->data() + (s * t + j) * d + c0;
                for (std::size_t i = 0; i < t; ++i) {
                  const double ds = dp[i * t + j];
                  const double* qi = Q + (s * t + i) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                         " rows");
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const double* z = logits.data().data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(z[j] - mx);
      s += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    loss += (mx + std::log(s)) - z[labels[i]];
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return make_op({1}, {loss}, {&logits}, [b, c, probs = std::move(probs), y = std::move(y)](TensorNode& o) {
    auto& g = *grad_of(o, 0);
    const double w = o.grad[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += w * (probs[i * c + j] - (j == y[i] ? 1.0 : 0.0));
  });
}

}  // namespace petlab
