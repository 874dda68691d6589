#pragma once

#include <cstddef>

// Low-level float kernels behind the tensor ops. Each kernel has an
// OpenMP-parallel version (turbo::kernels) and a plain serial version
// (turbo::kernels::serial). The serial versions are the reference used by
// tests and the bench_kernels tool; both compute every output element with
// the same accumulation order, so results agree bit-for-bit regardless of
// thread count.
namespace turbo::kernels {

// c[m,n] = a[m,k] * b[k,n]       (accumulate=false)
// c[m,n] += a[m,k] * b[k,n]      (accumulate=true)
void matmul_nn(float* c, const float* a, const float* b, int m, int k, int n,
               bool accumulate);

// c[m,p] (+)= a[m,n] * b[p,n]^T   i.e. c[i][j] = sum_k a[i][k] * b[j][k]
void matmul_nt(float* c, const float* a, const float* b, int m, int n, int p,
               bool accumulate);

// c[m,n] (+)= a[k,m]^T * b[k,n]   i.e. c[i][j] = sum_l a[l][i] * b[l][j]
void matmul_tn(float* c, const float* a, const float* b, int k, int m, int n,
               bool accumulate);

void add(float* out, const float* a, const float* b, std::size_t n);
void scale(float* out, const float* a, float s, std::size_t n);
void mul(float* out, const float* a, const float* b, std::size_t n);
void gelu(float* out, const float* x, std::size_t n);
void gelu_backward(float* dx, const float* x, const float* dy, std::size_t n);

// true if any element is NaN or +/-Inf
bool has_nonfinite(const float* x, std::size_t n);

namespace serial {
void matmul_nn(float* c, const float* a, const float* b, int m, int k, int n,
               bool accumulate);
void matmul_nt(float* c, const float* a, const float* b, int m, int n, int p,
               bool accumulate);
void matmul_tn(float* c, const float* a, const float* b, int k, int m, int n,
               bool accumulate);
void add(float* out, const float* a, const float* b, std::size_t n);
void scale(float* out, const float* a, float s, std::size_t n);
void mul(float* out, const float* a, const float* b, std::size_t n);
void gelu(float* out, const float* x, std::size_t n);
void gelu_backward(float* dx, const float* x, const float* dy, std::size_t n);
bool has_nonfinite(const float* x, std::size_t n);
}  // namespace serial

}  // namespace turbo::kernels
