#include "turbo/kernels.hpp"

#include <cmath>
#include <cstring>

namespace turbo::kernels {

namespace {
constexpr std::size_t kParallelCutoff = 16 * 1024;

inline float gelu_one(float x) {
  // exact GELU: x * Phi(x)
  return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
}

inline float gelu_grad_one(float x) {
  const float phi_cdf = 0.5f * (1.0f + std::erf(x * 0.70710678118654752440f));
  const float pdf = 0.39894228040143267794f * std::exp(-0.5f * x * x);
  return phi_cdf + x * pdf;
}

// Single output row of a matmul; shared by the parallel and serial drivers so
// per-element accumulation order is identical in both.
inline void row_nn(float* crow, const float* a, const float* b, int k, int n,
                   bool accumulate) {
  if (!accumulate) std::memset(crow, 0, sizeof(float) * static_cast<std::size_t>(n));
  for (int l = 0; l < k; ++l) {
    const float av = a[l];
    const float* brow = b + static_cast<std::size_t>(l) * n;
    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void row_nt(float* crow, const float* arow, const float* b, int n, int p,
                   bool accumulate) {
  for (int j = 0; j < p; ++j) {
    const float* brow = b + static_cast<std::size_t>(j) * n;
    float acc = 0.0f;
    for (int l = 0; l < n; ++l) acc += arow[l] * brow[l];
    crow[j] = accumulate ? crow[j] + acc : acc;
  }
}

inline void row_tn(float* crow, const float* a, const float* b, int k, int m, int n,
                   int i, bool accumulate) {
  if (!accumulate) std::memset(crow, 0, sizeof(float) * static_cast<std::size_t>(n));
  for (int l = 0; l < k; ++l) {
    const float av = a[static_cast<std::size_t>(l) * m + i];
    const float* brow = b + static_cast<std::size_t>(l) * n;
    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}
}  // namespace

void matmul_nn(float* c, const float* a, const float* b, int m, int k, int n,
               bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * k * n > kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    row_nn(c + static_cast<std::size_t>(i) * n, a + static_cast<std::size_t>(i) * k, b, k, n,
           accumulate);
  }
}

void matmul_nt(float* c, const float* a, const float* b, int m, int n, int p,
               bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * n * p > kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    row_nt(c + static_cast<std::size_t>(i) * p, a + static_cast<std::size_t>(i) * n, b, n, p,
           accumulate);
  }
}

void matmul_tn(float* c, const float* a, const float* b, int k, int m, int n,
               bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(k) * m * n > kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    row_tn(c + static_cast<std::size_t>(i) * n, a, b, k, m, n, i, accumulate);
  }
}

void add(float* out, const float* a, const float* b, std::size_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) out[i] = a[i] + b[i];
}

void scale(float* out, const float* a, float s, std::size_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) out[i] = a[i] * s;
}

void mul(float* out, const float* a, const float* b, std::size_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) out[i] = a[i] * b[i];
}

void gelu(float* out, const float* x, std::size_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) out[i] = gelu_one(x[i]);
}

void gelu_backward(float* dx, const float* x, const float* dy, std::size_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    dx[i] += gelu_grad_one(x[i]) * dy[i];
}

bool has_nonfinite(const float* x, std::size_t n) {
  int bad = 0;
#pragma omp parallel for schedule(static) reduction(| : bad) if (n > kParallelCutoff)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    bad |= !std::isfinite(x[i]);
  return bad != 0;
}

namespace serial {

void matmul_nn(float* c, const float* a, const float* b, int m, int k, int n,
               bool accumulate) {
  for (int i = 0; i < m; ++i)
    row_nn(c + static_cast<std::size_t>(i) * n, a + static_cast<std::size_t>(i) * k, b, k, n,
           accumulate);
}

void matmul_nt(float* c, const float* a, const float* b, int m, int n, int p,
               bool accumulate) {
  for (int i = 0; i < m; ++i)
    row_nt(c + static_cast<std::size_t>(i) * p, a + static_cast<std::size_t>(i) * n, b, n, p,
           accumulate);
}

void matmul_tn(float* c, const float* a, const float* b, int k, int m, int n,
               bool accumulate) {
  for (int i = 0; i < m; ++i)
    row_tn(c + static_cast<std::size_t>(i) * n, a, b, k, m, n, i, accumulate);
}

void add(float* out, const float* a, const float* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void scale(float* out, const float* a, float s, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

void mul(float* out, const float* a, const float* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void gelu(float* out, const float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = gelu_one(x[i]);
}

void gelu_backward(float* dx, const float* x, const float* dy, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += gelu_grad_one(x[i]) * dy[i];
}

bool has_nonfinite(const float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return true;
  return false;
}

}  // namespace serial

}  // namespace turbo::kernels
