#pragma once

#include <cstdint>

namespace mcft {
namespace kernels {

// Dense kernels used by the autodiff layer and the geometry pipeline. Each
// kernel parallelizes over independent output rows/elements, so results are
// bitwise identical to the serial reference in kernels::serial for any thread
// count (the per-element accumulation order never changes). The bench-kernels
// tool compares the two implementations; unit tests assert exact agreement.

// C[n,m] = A[n,k] * B[k,m]
void matmul_nn(const double* a, const double* b, double* c, int n, int k, int m);
// C[k,m] = A[n,k]^T * B[n,m]
void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m);
// C[n,k] = A[n,m] * B[k,m]^T
void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k);

// y[r,c] = x[r,c] + bias[c] broadcast over rows
void add_bias_rows(const double* x, const double* bias, double* y, int rows, int cols);

// row-wise softmax over the last dimension
void softmax_rows(const double* x, double* y, int rows, int cols);
// dx = y .* (dy - rowsum(dy .* y))
void softmax_rows_backward(const double* y, const double* dy, double* dx, int rows, int cols);

// Row-wise layer norm with affine parameters; saves mean and reciprocal std
// for the backward pass.
void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, double* mean, double* rstd, int rows, int cols,
                     double eps);
void layer_norm_rows_backward(const double* x, const double* gamma,
                              const double* mean, const double* rstd,
                              const double* dy, double* dx, double* dgamma,
                              double* dbeta, int rows, int cols);

// Exact (erf-based) GELU.
void gelu(const double* x, double* y, int64_t n);
void gelu_backward(const double* x, const double* dy, double* dx, int64_t n);

// dist[i] = min(dist[i], squared distance from points[i] to p). The farthest
// point sampling inner loop.
void min_sqdist_update(const double* points, int n, const double* p, double* dist);

// Serial reference implementations, kept for testing and benchmarking.
namespace serial {
void matmul_nn(const double* a, const double* b, double* c, int n, int k, int m);
void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m);
void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k);
void add_bias_rows(const double* x, const double* bias, double* y, int rows, int cols);
void softmax_rows(const double* x, double* y, int rows, int cols);
void softmax_rows_backward(const double* y, const double* dy, double* dx, int rows, int cols);
void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, double* mean, double* rstd, int rows, int cols,
                     double eps);
void layer_norm_rows_backward(const double* x, const double* gamma,
                              const double* mean, const double* rstd,
                              const double* dy, double* dx, double* dgamma,
                              double* dbeta, int rows, int cols);
void gelu(const double* x, double* y, int64_t n);
void gelu_backward(const double* x, const double* dy, double* dx, int64_t n);
void min_sqdist_update(const double* points, int n, const double* p, double* dist);
}  // namespace serial

}  // namespace kernels
}  // namespace mcft
