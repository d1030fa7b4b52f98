#pragma once

// Dense row-major GEMM kernels.
//
// `serial` is the reference implementation. `omp` splits output rows across
// OpenMP threads; every output element is accumulated in the same order as
// the serial loop, so both variants produce bitwise-identical results. The
// unqualified functions dispatch to `omp` for large problems when OpenMP is
// available and no parallel region is already active.

#include <cstddef>
#include <span>

namespace petlab::kernels {

struct GemmDims {
  std::size_t m;  // rows of the output
  std::size_t k;  // reduction length
  std::size_t n;  // columns of the output
};

namespace serial {

// C[m×n] (+)= A[m×k] · B[k×n]
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);
// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);
// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);

}  // namespace serial

namespace omp {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);

}  // namespace omp

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims,
             bool accumulate);

// Work (m·k·n) above which the dispatcher uses the OpenMP variant.
inline constexpr std::size_t kParallelWorkThreshold = 1u << 16;

bool openmp_enabled();
int max_threads();

}  // namespace petlab::kernels
