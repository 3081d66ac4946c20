#include "mcft/kernels.hpp"

#include <cmath>
#include <cstring>

namespace mcft {
namespace kernels {

// Work thresholds below which the OpenMP fork is not worth paying. The inner
// loop bodies are identical to the serial versions, so parallel and serial
// results match bitwise.
namespace {
constexpr int64_t kParallelThreshold = 16 * 1024;
}

namespace serial {

void matmul_nn(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int j = 0; j < m; ++j) crow[j] = 0.0;
    const double* arow = a + static_cast<int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<int64_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < k; ++i) {
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int j = 0; j < m; ++j) crow[j] = 0.0;
    for (int p = 0; p < n; ++p) {
      const double av = a[static_cast<int64_t>(p) * k + i];
      const double* brow = b + static_cast<int64_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * m;
    double* crow = c + static_cast<int64_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* brow = b + static_cast<int64_t>(j) * m;
      double s = 0.0;
      for (int p = 0; p < m; ++p) s += arow[p] * brow[p];
      crow[j] = s;
    }
  }
}

void add_bias_rows(const double* x, const double* bias, double* y, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    double* yr = y + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] + bias[j];
  }
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    double* yr = y + static_cast<int64_t>(i) * cols;
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

void softmax_rows_backward(const double* y, const double* dy, double* dx, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double* yr = y + static_cast<int64_t>(i) * cols;
    const double* dyr = dy + static_cast<int64_t>(i) * cols;
    double* dxr = dx + static_cast<int64_t>(i) * cols;
    double dot = 0.0;
    for (int j = 0; j < cols; ++j) dot += dyr[j] * yr[j];
    for (int j = 0; j < cols; ++j) dxr[j] = yr[j] * (dyr[j] - dot);
  }
}

void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, double* mean, double* rstd, int rows, int cols,
                     double eps) {
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    double* yr = y + static_cast<int64_t>(i) * cols;
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xr[j];
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= cols;
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    rstd[i] = rs;
    for (int j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
  }
}

void layer_norm_rows_backward(const double* x, const double* gamma,
                              const double* mean, const double* rstd,
                              const double* dy, double* dx, double* dgamma,
                              double* dbeta, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    const double* dyr = dy + static_cast<int64_t>(i) * cols;
    double* dxr = dx + static_cast<int64_t>(i) * cols;
    const double mu = mean[i];
    const double rs = rstd[i];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mu) * rs;
      const double dxhat = dyr[j] * gamma[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    const double inv_n = 1.0 / cols;
    for (int j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mu) * rs;
      const double dxhat = dyr[j] * gamma[j];
      dxr[j] = rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
    }
  }
  // Parameter gradients reduce over rows; done serially in both variants so
  // the accumulation order is fixed.
  for (int j = 0; j < cols; ++j) {
    dgamma[j] = 0.0;
    dbeta[j] = 0.0;
  }
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    const double* dyr = dy + static_cast<int64_t>(i) * cols;
    const double mu = mean[i];
    const double rs = rstd[i];
    for (int j = 0; j < cols; ++j) {
      dgamma[j] += dyr[j] * (xr[j] - mu) * rs;
      dbeta[j] += dyr[j];
    }
  }
}

namespace {
inline double gelu_one(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad_one(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}
}  // namespace

void gelu(const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const double* x, const double* dy, double* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[i] = dy[i] * gelu_grad_one(x[i]);
}

void min_sqdist_update(const double* points, int n, const double* p, double* dist) {
  for (int i = 0; i < n; ++i) {
    const double dx = points[3 * i] - p[0];
    const double dy = points[3 * i + 1] - p[1];
    const double dz = points[3 * i + 2] - p[2];
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < dist[i]) dist[i] = d;
  }
}

}  // namespace serial

void matmul_nn(const double* a, const double* b, double* c, int n, int k, int m) {
  const int64_t work = static_cast<int64_t>(n) * k * m;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < n; ++i) {
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int j = 0; j < m; ++j) crow[j] = 0.0;
    const double* arow = a + static_cast<int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<int64_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m) {
  const int64_t work = static_cast<int64_t>(n) * k * m;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < k; ++i) {
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int j = 0; j < m; ++j) crow[j] = 0.0;
    for (int p = 0; p < n; ++p) {
      const double av = a[static_cast<int64_t>(p) * k + i];
      const double* brow = b + static_cast<int64_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k) {
  const int64_t work = static_cast<int64_t>(n) * m * k;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * m;
    double* crow = c + static_cast<int64_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* brow = b + static_cast<int64_t>(j) * m;
      double s = 0.0;
      for (int p = 0; p < m; ++p) s += arow[p] * brow[p];
      crow[j] = s;
    }
  }
}

void add_bias_rows(const double* x, const double* bias, double* y, int rows, int cols) {
  const int64_t work = static_cast<int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    double* yr = y + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] + bias[j];
  }
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
  const int64_t work = static_cast<int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < rows; ++i)
    serial::softmax_rows(x + static_cast<int64_t>(i) * cols,
                         y + static_cast<int64_t>(i) * cols, 1, cols);
}

void softmax_rows_backward(const double* y, const double* dy, double* dx, int rows, int cols) {
  const int64_t work = static_cast<int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < rows; ++i)
    serial::softmax_rows_backward(y + static_cast<int64_t>(i) * cols,
                                  dy + static_cast<int64_t>(i) * cols,
                                  dx + static_cast<int64_t>(i) * cols, 1, cols);
}

void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, double* mean, double* rstd, int rows, int cols,
                     double eps) {
  const int64_t work = static_cast<int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < rows; ++i)
    serial::layer_norm_rows(x + static_cast<int64_t>(i) * cols, gamma, beta,
                            y + static_cast<int64_t>(i) * cols, mean + i, rstd + i,
                            1, cols, eps);
}

void layer_norm_rows_backward(const double* x, const double* gamma,
                              const double* mean, const double* rstd,
                              const double* dy, double* dx, double* dgamma,
                              double* dbeta, int rows, int cols) {
  const int64_t work = static_cast<int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    const double* dyr = dy + static_cast<int64_t>(i) * cols;
    double* dxr = dx + static_cast<int64_t>(i) * cols;
    const double mu = mean[i];
    const double rs = rstd[i];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mu) * rs;
      const double dxhat = dyr[j] * gamma[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    const double inv_n = 1.0 / cols;
    for (int j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mu) * rs;
      const double dxhat = dyr[j] * gamma[j];
      dxr[j] = rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
    }
  }
  for (int j = 0; j < cols; ++j) {
    dgamma[j] = 0.0;
    dbeta[j] = 0.0;
  }
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<int64_t>(i) * cols;
    const double* dyr = dy + static_cast<int64_t>(i) * cols;
    const double mu = mean[i];
    const double rs = rstd[i];
    for (int j = 0; j < cols; ++j) {
      dgamma[j] += dyr[j] * (xr[j] - mu) * rs;
      dbeta[j] += dyr[j];
    }
  }
}

void gelu(const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (int64_t i = 0; i < n; ++i) y[i] = serial::gelu_one(x[i]);
}

void gelu_backward(const double* x, const double* dy, double* dx, int64_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (int64_t i = 0; i < n; ++i) dx[i] = dy[i] * serial::gelu_grad_one(x[i]);
}

void min_sqdist_update(const double* points, int n, const double* p, double* dist) {
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (int i = 0; i < n; ++i) {
    const double dx = points[3 * i] - p[0];
    const double dy = points[3 * i + 1] - p[1];
    const double dz = points[3 * i + 2] - p[2];
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < dist[i]) dist[i] = d;
  }
}

}  // namespace kernels
}  // namespace mcft
