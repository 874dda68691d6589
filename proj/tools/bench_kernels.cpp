// Benchmark comparing the OpenMP kernels against the serial reference
// implementations across a few representative shapes.

#include <chrono>
#include <cstdio>
#include <vector>

#include <omp.h>

#include "turbo/kernels.hpp"
#include "turbo/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void fill(std::vector<float>& v, turbo::Rng& rng) {
  for (float& x : v) x = static_cast<float>(rng.normal());
}

void bench_matmul(int m, int k, int n, int reps) {
  turbo::Rng rng(1);
  std::vector<float> a(static_cast<std::size_t>(m) * k), b(static_cast<std::size_t>(k) * n),
      c(static_cast<std::size_t>(m) * n);
  fill(a, rng);
  fill(b, rng);

  auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    turbo::kernels::serial::matmul_nn(c.data(), a.data(), b.data(), m, k, n, false);
  const double serial_ms = ms_since(t0) / reps;

  t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    turbo::kernels::matmul_nn(c.data(), a.data(), b.data(), m, k, n, false);
  const double omp_ms = ms_since(t0) / reps;

  const double gflop = 2.0 * m * k * n / 1e9;
  std::printf("matmul %4dx%4dx%4d  serial %8.3f ms (%6.2f GF/s)  omp %8.3f ms (%6.2f GF/s)  speedup %.2fx\n",
              m, k, n, serial_ms, gflop / (serial_ms / 1e3), omp_ms, gflop / (omp_ms / 1e3),
              serial_ms / omp_ms);
}

void bench_elementwise(std::size_t n, int reps) {
  turbo::Rng rng(2);
  std::vector<float> a(n), b(n), out(n);
  fill(a, rng);
  fill(b, rng);

  auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) turbo::kernels::serial::gelu(out.data(), a.data(), n);
  const double serial_ms = ms_since(t0) / reps;
  t0 = Clock::now();
  for (int r = 0; r < reps; ++r) turbo::kernels::gelu(out.data(), a.data(), n);
  const double omp_ms = ms_since(t0) / reps;
  std::printf("gelu   n=%-9zu serial %8.3f ms            omp %8.3f ms            speedup %.2fx\n",
              n, serial_ms, omp_ms, serial_ms / omp_ms);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  bench_matmul(64, 128, 512, 50);
  bench_matmul(256, 256, 256, 30);
  bench_matmul(1024, 512, 512, 5);
  bench_elementwise(1 << 16, 200);
  bench_elementwise(1 << 22, 10);
  return 0;
}
