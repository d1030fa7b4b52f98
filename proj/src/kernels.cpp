#include "petlab/kernels.hpp"

#include <algorithm>

#ifdef PETLAB_HAVE_OPENMP
#include <omp.h>
#endif

namespace petlab::kernels {
namespace {

// Row-range bodies shared by both variants, so the summation order of every
// output element does not depend on the thread count.

void nn_rows(const double* __restrict a, const double* __restrict b, double* __restrict c, GemmDims d, bool acc, std::size_t r0,
             std::size_t r1) {
  for (std::size_t i = r0; i < r1; ++i) {
    double* ci = c + i * d.n;
    if (!acc) std::fill(ci, ci + d.n, 0.0);
    const double* ai = a + i * d.k;
    for (std::size_t p = 0; p < d.k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) ci[j] += av * bp[j];
    }
  }
}

void tn_rows(const double* __restrict a, const double* __restrict b, double* __restrict c, GemmDims d, bool acc, std::size_t r0,
             std::size_t r1) {
  for (std::size_t i = r0; i < r1; ++i) {
    double* ci = c + i * d.n;
    if (!acc) std::fill(ci, ci + d.n, 0.0);
    for (std::size_t p = 0; p < d.k; ++p) {
      const double av = a[p * d.m + i];
      const double* bp = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) ci[j] += av * bp[j];
    }
  }
}

void nt_rows(const double* __restrict a, const double* __restrict b, double* __restrict c, GemmDims d, bool acc, std::size_t r0,
             std::size_t r1) {
  for (std::size_t i = r0; i < r1; ++i) {
    const double* ai = a + i * d.k;
    double* ci = c + i * d.n;
    for (std::size_t j = 0; j < d.n; ++j) {
      const double* bj = b + j * d.k;
      // Four interleaved partial sums, combined in a fixed order.
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t p = 0;
      for (; p + 4 <= d.k; p += 4) {
        s0 += ai[p] * bj[p];
        s1 += ai[p + 1] * bj[p + 1];
        s2 += ai[p + 2] * bj[p + 2];
        s3 += ai[p + 3] * bj[p + 3];
      }
      for (; p < d.k; ++p) s0 += ai[p] * bj[p];
      const double s = (s0 + s1) + (s2 + s3);
      ci[j] = acc ? ci[j] + s : s;
    }
  }
}

using RowBody = void (*)(const double*, const double*, double*, GemmDims, bool, std::size_t, std::size_t);

void run_parallel(RowBody body, std::span<const double> a, std::span<const double> b, std::span<double> c,
                  GemmDims d, bool acc) {
#ifdef PETLAB_HAVE_OPENMP
  const auto rows = static_cast<std::ptrdiff_t>(d.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    body(a.data(), b.data(), c.data(), d, acc, static_cast<std::size_t>(i), static_cast<std::size_t>(i) + 1);
  }
#else
  body(a.data(), b.data(), c.data(), d, acc, 0, d.m);
#endif
}

bool prefer_parallel(GemmDims d) {
#ifdef PETLAB_HAVE_OPENMP
  return d.m > 1 && d.m * d.k * d.n >= kParallelWorkThreshold && omp_get_max_threads() > 1 &&
         !omp_in_parallel();
#else
  (void)d;
  return false;
#endif
}

}  // namespace

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  nn_rows(a.data(), b.data(), c.data(), dims, accumulate, 0, dims.m);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  tn_rows(a.data(), b.data(), c.data(), dims, accumulate, 0, dims.m);
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  nt_rows(a.data(), b.data(), c.data(), dims, accumulate, 0, dims.m);
}

}  // namespace serial

namespace omp {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  run_parallel(nn_rows, a, b, c, dims, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  run_parallel(tn_rows, a, b, c, dims, accumulate);
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  run_parallel(nt_rows, a, b, c, dims, accumulate);
}

}  // namespace omp

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  if (prefer_parallel(dims)) {
    omp::gemm_nn(a, b, c, dims, accumulate);
  } else {
    serial::gemm_nn(a, b, c, dims, accumulate);
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  if (prefer_parallel(dims)) {
    omp::gemm_tn(a, b, c, dims, accumulate);
  } else {
    serial::gemm_tn(a, b, c, dims, accumulate);
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate) {
  if (prefer_parallel(dims)) {
    omp::gemm_nt(a, b, c, dims, accumulate);
  } else {
    serial::gemm_nt(a, b, c, dims, accumulate);
  }
}

bool openmp_enabled() {
#ifdef PETLAB_HAVE_OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef PETLAB_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace petlab::kernels
