#include <doctest.h>

#include <limits>
#include <tuple>
#include <vector>

#include "turbo/kernels.hpp"
#include "turbo/rng.hpp"

using namespace turbo;

namespace {
std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.normal());
  return v;
}
}  // namespace

TEST_CASE("parallel matmul kernels agree bit-for-bit with the serial reference") {
  Rng rng(11);
  for (auto [m, k, n] :
       {std::tuple<int, int, int>{3, 5, 7}, {64, 128, 512}, {129, 33, 65}, {1, 1, 1}}) {
    const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
    const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
    std::vector<float> c1(static_cast<std::size_t>(m) * n), c2 = c1;

    kernels::matmul_nn(c1.data(), a.data(), b.data(), m, k, n, false);
    kernels::serial::matmul_nn(c2.data(), a.data(), b.data(), m, k, n, false);
    CHECK(c1 == c2);

    const auto a2 = random_vec(static_cast<std::size_t>(m) * n, rng);
    const auto b2 = random_vec(static_cast<std::size_t>(k) * n, rng);
    std::vector<float> d1(static_cast<std::size_t>(m) * k, 0.5f), d2 = d1;
    kernels::matmul_nt(d1.data(), a2.data(), b2.data(), m, n, k, true);
    kernels::serial::matmul_nt(d2.data(), a2.data(), b2.data(), m, n, k, true);
    CHECK(d1 == d2);

    const auto a3 = random_vec(static_cast<std::size_t>(k) * m, rng);
    std::vector<float> e1(static_cast<std::size_t>(m) * n, 1.0f), e2 = e1;
    kernels::matmul_tn(e1.data(), a3.data(), b2.data(), k, m, n, true);
    kernels::serial::matmul_tn(e2.data(), a3.data(), b2.data(), k, m, n, true);
    CHECK(e1 == e2);
  }
}

TEST_CASE("matmul_nn computes the textbook product") {
  const std::vector<float> a = {1, 2, 3, 4, 5, 6};
  const std::vector<float> b = {7, 8, 9, 10, 11, 12};
  std::vector<float> c(4);
  kernels::matmul_nn(c.data(), a.data(), b.data(), 2, 3, 2, false);
  CHECK(c == std::vector<float>{58, 64, 139, 154});
}

TEST_CASE("transposed-variant kernels match explicit transposition") {
  Rng rng(5);
  const int m = 6, k = 9, n = 4;
  const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
  const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);

  std::vector<float> bt(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j)
      bt[static_cast<std::size_t>(j) * k + i] = b[static_cast<std::size_t>(i) * n + j];
  std::vector<float> c_nn(static_cast<std::size_t>(m) * n), c_nt = c_nn;
  kernels::matmul_nn(c_nn.data(), a.data(), b.data(), m, k, n, false);
  kernels::matmul_nt(c_nt.data(), a.data(), bt.data(), m, k, n, false);
  for (std::size_t i = 0; i < c_nn.size(); ++i)
    CHECK(c_nn[i] == doctest::Approx(c_nt[i]).epsilon(1e-5));

  std::vector<float> at(static_cast<std::size_t>(k) * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j)
      at[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * k + j];
  std::vector<float> c_tn(static_cast<std::size_t>(m) * n);
  kernels::matmul_tn(c_tn.data(), at.data(), b.data(), k, m, n, false);
  for (std::size_t i = 0; i < c_nn.size(); ++i)
    CHECK(c_nn[i] == doctest::Approx(c_tn[i]).epsilon(1e-5));
}

TEST_CASE("elementwise kernels: parallel equals serial") {
  Rng rng(17);
  const std::size_t n = 100003;
  const auto a = random_vec(n, rng);
  const auto b = random_vec(n, rng);
  std::vector<float> o1(n), o2(n);

  kernels::add(o1.data(), a.data(), b.data(), n);
  kernels::serial::add(o2.data(), a.data(), b.data(), n);
  CHECK(o1 == o2);

  kernels::mul(o1.data(), a.data(), b.data(), n);
  kernels::serial::mul(o2.data(), a.data(), b.data(), n);
  CHECK(o1 == o2);

  kernels::scale(o1.data(), a.data(), 1.7f, n);
  kernels::serial::scale(o2.data(), a.data(), 1.7f, n);
  CHECK(o1 == o2);

  kernels::gelu(o1.data(), a.data(), n);
  kernels::serial::gelu(o2.data(), a.data(), n);
  CHECK(o1 == o2);

  std::vector<float> g1(n, 0.25f), g2(n, 0.25f);
  kernels::gelu_backward(g1.data(), a.data(), b.data(), n);
  kernels::serial::gelu_backward(g2.data(), a.data(), b.data(), n);
  CHECK(g1 == g2);
}

TEST_CASE("gelu values at known points") {
  std::vector<float> x = {0.0f, 6.0f, -6.0f, 1.0f};
  std::vector<float> y(4);
  kernels::gelu(y.data(), x.data(), 4);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == doctest::Approx(6.0f).epsilon(1e-6));
  CHECK(std::abs(y[2]) < 1e-5f);
  CHECK(y[3] == doctest::Approx(0.8413447f).epsilon(1e-5));  // 1 * Phi(1)
}

TEST_CASE("has_nonfinite flags NaN and Inf in both variants") {
  std::vector<float> v(50000, 1.0f);
  CHECK_FALSE(kernels::has_nonfinite(v.data(), v.size()));
  CHECK_FALSE(kernels::serial::has_nonfinite(v.data(), v.size()));
  v[49999] = std::numeric_limits<float>::infinity();
  CHECK(kernels::has_nonfinite(v.data(), v.size()));
  CHECK(kernels::serial::has_nonfinite(v.data(), v.size()));
  v[49999] = std::numeric_limits<float>::quiet_NaN();
  CHECK(kernels::has_nonfinite(v.data(), v.size()));
  CHECK(kernels::serial::has_nonfinite(v.data(), v.size()));
}
