#pragma once

// Row-major dense kernels shared by matmul and convolution. Loop orders are
// fixed so results are bit-reproducible for identical inputs.

#include <cstddef>

namespace mamt4::kernels {

double dot(const double* a, const double* b, std::size_t n);

// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate);

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                 double* c);

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                 double* c);

}  // namespace mamt4::kernels
