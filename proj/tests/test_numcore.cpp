#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "turbo/ops.hpp"
#include "turbo/rng.hpp"
#include "turbo/tensor.hpp"

using namespace turbo;

TEST_CASE("tensor construction enforces shape/data consistency") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({-1}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0f, 2.0f, 3.0f}), DimensionError);
  CHECK_THROWS_AS(t.reshaped({5}), DimensionError);
  Tensor r = t.reshaped({3, 2});
  CHECK(r.data == t.data);  // same storage
}

TEST_CASE("matmul: identity and hand arithmetic") {
  const Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  const Tensor c = ops::matmul(i2, b);
  CHECK(*c.data == *b.data);

  const Tensor a = Tensor::from({1, 2}, {1, 2});
  const Tensor d = Tensor::from({2, 1}, {3, 4});
  CHECK(ops::matmul(a, d).scalar() == 11.0f);
}

TEST_CASE("matmul: dimension error names both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 5});
  try {
    ops::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("softmax: symmetry, closed form and low temperature") {
  const Tensor x = Tensor::from({3}, {0, 0, 0});
  const Tensor s = ops::softmax(x, 1.0f);
  for (int i = 0; i < 3; ++i)
    CHECK((*s.data)[static_cast<std::size_t>(i)] == doctest::Approx(1.0f / 3.0f).epsilon(1e-6));

  // e^0 / (e^0 + 3) = 1/4 when the other logit is ln 3
  const Tensor y = Tensor::from({2}, {0.0f, std::log(3.0f)});
  const Tensor sy = ops::softmax(y, 1.0f);
  CHECK((*sy.data)[0] == doctest::Approx(0.25f).epsilon(1e-6));
  CHECK((*sy.data)[1] == doctest::Approx(0.75f).epsilon(1e-6));

  // T = 0.01 sharpens any >= 0.1 logit lead past 0.99
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z = Tensor::randn({8}, rng, 1.0f);
    int argmax = 0;
    float best = (*z.data)[0], second = -1e30f;
    for (int i = 1; i < 8; ++i)
      if ((*z.data)[static_cast<std::size_t>(i)] > best) {
        second = best;
        best = (*z.data)[static_cast<std::size_t>(i)];
        argmax = i;
      } else if ((*z.data)[static_cast<std::size_t>(i)] > second) {
        second = (*z.data)[static_cast<std::size_t>(i)];
      }
    if (best - second < 0.1f) continue;
    const Tensor sz = ops::softmax(z, 0.01f);
    CHECK((*sz.data)[static_cast<std::size_t>(argmax)] > 0.99f);
  }
}

TEST_CASE("softmax: rows sum to one for |x| <= 50") {
  Rng rng(9);
  Tensor x = Tensor::zeros({40, 17});
  for (auto& v : *x.data) v = static_cast<float>(rng.uniform() * 100.0 - 50.0);
  const Tensor s = ops::softmax(x, 1.0f);
  for (int r = 0; r < 40; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 17; ++j) sum += (*s.data)[static_cast<std::size_t>(r) * 17 + j];
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("softmax: non-positive temperature is a parameter error") {
  const Tensor x = Tensor::from({2}, {1, 2});
  CHECK_THROWS_AS(ops::softmax(x, 0.0f), ParamError);
  CHECK_THROWS_AS(ops::softmax(x, -1.0f), ParamError);
}

TEST_CASE("rmsnorm: unit rows and known scaling") {
  const Tensor ones = Tensor::from({1, 4}, {1, 1, 1, 1});
  const Tensor w = Tensor::from({4}, {1, 1, 1, 1});
  const Tensor y = ops::rmsnorm(ones, w, 0.0f);
  for (float v : *y.data) CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));

  // rms of [2,2] is 2, so the row normalizes to ones
  const Tensor x = Tensor::from({1, 2}, {2, 2});
  const Tensor w2 = Tensor::from({2}, {1, 1});
  const Tensor y2 = ops::rmsnorm(x, w2, 0.0f);
  CHECK((*y2.data)[0] == doctest::Approx(1.0f).epsilon(1e-6));
  CHECK((*y2.data)[1] == doctest::Approx(1.0f).epsilon(1e-6));

  CHECK_THROWS_AS(ops::rmsnorm(x, w, 0.0f), DimensionError);
}

namespace {
// independent scalar log-sum-exp oracle in double
double ce_oracle(const std::vector<float>& logits, int rows, int cols,
                 const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
  double total = 0.0;
  int count = 0;
  for (int r = 0; r < rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    double mx = -1e300;
    for (int j = 0; j < cols; ++j)
      mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(r) * cols + j]));
    double lse = 0.0;
    for (int j = 0; j < cols; ++j)
      lse += std::exp(static_cast<double>(logits[static_cast<std::size_t>(r) * cols + j]) - mx);
    total += std::log(lse) + mx -
             logits[static_cast<std::size_t>(r) * cols + targets[static_cast<std::size_t>(r)]];
    ++count;
  }
  return total / count;
}
}  // namespace

TEST_CASE("cross_entropy: closed forms and oracle agreement") {
  // uniform logits over V=10: loss is ln 10
  Tensor uniform = Tensor::zeros({3, 10});
  const Tensor l1 = ops::cross_entropy(uniform, {1, 5, 9}, {1, 1, 1});
  CHECK(l1.scalar() == doctest::Approx(std::log(10.0)).epsilon(1e-6));

  // +20 on the target saturates
  Tensor sharp = Tensor::zeros({2, 10});
  (*sharp.data)[3] = 20.0f;
  (*sharp.data)[10 + 7] = 20.0f;
  CHECK(ops::cross_entropy(sharp, {3, 7}, {1, 1}).scalar() < 1e-6f);

  // random case vs the independent oracle
  Rng rng(21);
  Tensor r = Tensor::randn({4, 10}, rng, 2.0f);
  const std::vector<int> targets = {0, 9, 4, 2};
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1};
  const Tensor lr = ops::cross_entropy(r, targets, mask);
  CHECK(lr.scalar() == doctest::Approx(ce_oracle(*r.data, 4, 10, targets, mask)).epsilon(1e-5));
}

TEST_CASE("cross_entropy: error cases") {
  Tensor logits = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0, 1}, {0, 0}), ParamError);   // all masked
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0, 4}, {1, 1}), ParamError);   // target >= V
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0, -1}, {1, 1}), ParamError);  // negative target
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0}, {1, 1}), DimensionError);  // length mismatch
}

TEST_CASE("embedding gathers rows; invalid ids rejected") {
  const Tensor table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21});
  const Tensor out = ops::embedding(table, {2, 0, 2});
  CHECK(*out.data == std::vector<float>{20, 21, 0, 1, 20, 21});
  CHECK_THROWS_AS(ops::embedding(table, {3}), ParamError);
  CHECK_THROWS_AS(ops::embedding(table, {-1}), ParamError);
}

TEST_CASE("transpose swaps axes") {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor t = ops::transpose(a);
  CHECK(t.shape == std::vector<int>{3, 2});
  CHECK(*t.data == std::vector<float>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("causal_mask_add blocks future positions only") {
  // scores [1, 2, 4]: queries at absolute positions 2 and 3
  Tensor s = Tensor::zeros({1, 2, 4});
  const Tensor m = ops::causal_mask_add(s, 2);
  // query 0 (pos 2) sees keys 0..2; query 1 (pos 3) sees all 4
  CHECK((*m.data)[0] == 0.0f);
  CHECK((*m.data)[1] == 0.0f);
  CHECK((*m.data)[2] == 0.0f);
  CHECK((*m.data)[3] < -1e29f);
  for (int j = 0; j < 4; ++j) CHECK((*m.data)[static_cast<std::size_t>(4 + j)] == 0.0f);
  CHECK_THROWS_AS(ops::causal_mask_add(s, -1), ParamError);
}

TEST_CASE("concat_seq and slice_seq round trip") {
  Rng rng(2);
  const Tensor a = Tensor::randn({2, 3, 4}, rng, 1.0f);
  const Tensor b = Tensor::randn({2, 2, 4}, rng, 1.0f);
  const Tensor cat = ops::concat_seq({a, b});
  CHECK(cat.shape == std::vector<int>{2, 5, 4});
  const Tensor sa = ops::slice_seq(cat, 0, 3);
  const Tensor sb = ops::slice_seq(cat, 3, 2);
  CHECK(*sa.data == *a.data);
  CHECK(*sb.data == *b.data);
  CHECK_THROWS_AS(ops::slice_seq(cat, 4, 2), DimensionError);
  CHECK_THROWS_AS(ops::concat_seq({a, Tensor::zeros({2, 2, 5})}), DimensionError);
  CHECK_THROWS_AS(ops::concat_seq({}), ParamError);
}

TEST_CASE("masked_attention matches a hand-rolled scalar computation") {
  // one batch, one head, head dim 4, two cached chunks + current group of 2
  Rng rng(31);
  const Tensor q = Tensor::randn({1, 2, 4}, rng, 1.0f);
  const Tensor k1 = Tensor::randn({1, 2, 4}, rng, 1.0f);
  const Tensor v1 = Tensor::randn({1, 2, 4}, rng, 1.0f);
  const Tensor k2 = Tensor::randn({1, 2, 4}, rng, 1.0f);
  const Tensor v2 = Tensor::randn({1, 2, 4}, rng, 1.0f);
  const Tensor out = ops::masked_attention(q, {k1, k2}, {v1, v2}, 1, 2);

  const float* kk[4] = {k1.ptr(), k1.ptr() + 4, k2.ptr(), k2.ptr() + 4};
  const float* vv[4] = {v1.ptr(), v1.ptr() + 4, v2.ptr(), v2.ptr() + 4};
  for (int qi = 0; qi < 2; ++qi) {
    const int klen = 2 + qi + 1;
    std::vector<double> sc(static_cast<std::size_t>(klen));
    double mx = -1e300;
    for (int j = 0; j < klen; ++j) {
      double dot = 0.0;
      for (int e = 0; e < 4; ++e)
        dot += static_cast<double>(q.ptr()[qi * 4 + e]) * kk[j][e];
      sc[static_cast<std::size_t>(j)] = dot / 2.0;  // 1/sqrt(4)
      mx = std::max(mx, sc[static_cast<std::size_t>(j)]);
    }
    double sum = 0.0;
    for (int j = 0; j < klen; ++j) sum += std::exp(sc[static_cast<std::size_t>(j)] - mx);
    for (int e = 0; e < 4; ++e) {
      double acc = 0.0;
      for (int j = 0; j < klen; ++j)
        acc += std::exp(sc[static_cast<std::size_t>(j)] - mx) / sum * vv[j][e];
      CHECK(out.ptr()[qi * 4 + e] == doctest::Approx(static_cast<float>(acc)).epsilon(1e-5));
    }
  }
}

TEST_CASE("masked_attention validates cache length against position offset") {
  Rng rng(1);
  const Tensor q = Tensor::randn({1, 2, 4}, rng, 1.0f);
  const Tensor k = Tensor::randn({1, 2, 4}, rng, 1.0f);
  const Tensor v = Tensor::randn({1, 2, 4}, rng, 1.0f);
  CHECK_THROWS_AS(ops::masked_attention(q, {k}, {v}, 1, 1), StateError);  // 2 != 1 + 2
  CHECK_NOTHROW(ops::masked_attention(q, {k}, {v}, 1, 0));
  CHECK_THROWS_AS(ops::masked_attention(q, {k}, {v}, 3, 0), DimensionError);  // 4 % 3 != 0
}

TEST_CASE("ops reject non-finite results instead of propagating them") {
  const Tensor big = Tensor::full({4}, 3e38f);
  CHECK_THROWS_AS(ops::add(big, big), NumericError);
  CHECK_THROWS_AS(ops::scale(big, 10.0f), NumericError);
  const Tensor nan_in = Tensor::full({2, 2}, std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_AS(ops::matmul(nan_in, nan_in), NumericError);
}

TEST_CASE("tape runs each backward rule exactly once, in reverse") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = ops::scale(x, 3.0f);        // dy/dx = 3
    Tensor z = ops::mul(y, y);             // dz/dy = 2y
    CHECK(tape.size() == 2);
    z.grad_ptr()[0] = 1.0f;
    z.grad_ptr()[1] = 1.0f;
    tape.backward();
  }
  // dz/dx = 2 * (3x) * 3 = 18x
  CHECK(x.grad_ptr()[0] == doctest::Approx(18.0f));
  CHECK(x.grad_ptr()[1] == doctest::Approx(36.0f));
  CHECK(tape.size() == 0);  // consumed; a second backward() is a no-op
  tape.backward();
  CHECK(x.grad_ptr()[0] == doctest::Approx(18.0f));
}

TEST_CASE("ops run without recording when no tape is active") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  Tensor y = ops::scale(x, 2.0f);
  CHECK_FALSE(y.requires_grad);
}
