// Finite-difference gradient checks for every differentiable op: central
// differences at eps = 1e-3 in fp32, >= 100 random points per op across the
// random instances below.

#include <doctest.h>

#include "testutil.hpp"
#include "turbo/ops.hpp"

using namespace turbo;
using testutil::check_gradients;

TEST_CASE("matmul gradients vs finite differences") {
  Rng rng(101);
  int points = 0;
  for (int trial = 0; trial < 3; ++trial) {
    Tensor a = Tensor::randn({5, 7}, rng, 0.7f, true);
    Tensor b = Tensor::randn({7, 3}, rng, 0.7f, true);
    auto stats = check_gradients([&] { return ops::matmul(a, b); }, {a, b}, 30, rng);
    points += stats.points;
  }
  CHECK(points >= 100);
}

TEST_CASE("add / scale / mul / bias_add gradients") {
  Rng rng(102);
  for (int trial = 0; trial < 2; ++trial) {
    Tensor a = Tensor::randn({6, 9}, rng, 1.0f, true);
    Tensor b = Tensor::randn({6, 9}, rng, 1.0f, true);
    check_gradients([&] { return ops::add(a, b); }, {a, b}, 30, rng);
    check_gradients([&] { return ops::mul(a, b); }, {a, b}, 30, rng);
    check_gradients([&] { return ops::scale(a, -1.6f); }, {a}, 50, rng);
    Tensor bias = Tensor::randn({9}, rng, 1.0f, true);
    check_gradients([&] { return ops::bias_add(a, bias); }, {a, bias}, 30, rng);
  }
}

TEST_CASE("gelu gradients") {
  Rng rng(103);
  for (int trial = 0; trial < 2; ++trial) {
    Tensor x = Tensor::randn({8, 11}, rng, 1.5f, true);
    check_gradients([&] { return ops::gelu(x); }, {x}, 60, rng);
  }
}

TEST_CASE("rmsnorm gradients") {
  Rng rng(104);
  for (int trial = 0; trial < 2; ++trial) {
    Tensor x = Tensor::randn({4, 12}, rng, 1.0f, true);
    Tensor w = Tensor::randn({12}, rng, 0.5f, true);
    for (auto& v : *w.data) v += 1.0f;
    check_gradients([&] { return ops::rmsnorm(x, w, 1e-5f); }, {x, w}, 40, rng);
  }
}

TEST_CASE("softmax gradients at several temperatures") {
  Rng rng(105);
  for (float temp : {1.0f, 0.7f, 2.5f}) {
    Tensor x = Tensor::randn({5, 9}, rng, 1.0f, true);
    check_gradients([&] { return ops::softmax(x, temp); }, {x}, 40, rng);
  }
}

TEST_CASE("cross_entropy gradients") {
  Rng rng(106);
  for (int trial = 0; trial < 2; ++trial) {
    Tensor logits = Tensor::randn({6, 10}, rng, 1.2f, true);
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
    for (int i = 0; i < 6; ++i) {
      targets.push_back(static_cast<int>(rng.uniform_int(0, 9)));
      mask.push_back(i % 3 == 2 ? 0 : 1);
    }
    check_gradients([&] { return ops::cross_entropy(logits, targets, mask); }, {logits}, 60, rng);
  }
}

TEST_CASE("embedding gradients (scatter into the table)") {
  Rng rng(107);
  Tensor table = Tensor::randn({7, 6}, rng, 1.0f, true);
  const std::vector<int> ids = {3, 0, 3, 6, 1, 3};  // repeats exercise accumulation
  check_gradients([&] { return ops::embedding(table, ids); }, {table}, 42, rng);
}

TEST_CASE("transpose / causal_mask / concat / slice gradients") {
  Rng rng(108);
  Tensor a = Tensor::randn({5, 8}, rng, 1.0f, true);
  check_gradients([&] { return ops::transpose(a); }, {a}, 40, rng);

  Tensor scores = Tensor::randn({2, 3, 5}, rng, 1.0f, true);
  check_gradients([&] { return ops::softmax(ops::causal_mask_add(scores, 2), 1.0f); }, {scores},
                  30, rng);

  Tensor p1 = Tensor::randn({2, 3, 4}, rng, 1.0f, true);
  Tensor p2 = Tensor::randn({2, 2, 4}, rng, 1.0f, true);
  check_gradients([&] { return ops::concat_seq({p1, p2}); }, {p1, p2}, 25, rng);
  check_gradients([&] { return ops::slice_seq(p1, 1, 2); }, {p1}, 24, rng);
}

TEST_CASE("masked_attention gradients through q, cached k/v chunks") {
  Rng rng(109);
  for (int heads : {1, 2}) {
    Tensor q = Tensor::randn({2, 2, 4}, rng, 0.8f, true);
    Tensor k1 = Tensor::randn({2, 3, 4}, rng, 0.8f, true);
    Tensor v1 = Tensor::randn({2, 3, 4}, rng, 0.8f, true);
    Tensor k2 = Tensor::randn({2, 2, 4}, rng, 0.8f, true);
    Tensor v2 = Tensor::randn({2, 2, 4}, rng, 0.8f, true);
    check_gradients([&] { return ops::masked_attention(q, {k1, k2}, {v1, v2}, heads, 3); },
                    {q, k1, v1, k2, v2}, 16, rng);
  }
}

TEST_CASE("composed graph: tiny MLP end-to-end gradient check") {
  Rng rng(110);
  Tensor x = Tensor::randn({4, 6}, rng, 1.0f, true);
  Tensor w1 = Tensor::randn({6, 10}, rng, 0.5f, true);
  Tensor b1 = Tensor::randn({10}, rng, 0.5f, true);
  Tensor w2 = Tensor::randn({10, 5}, rng, 0.5f, true);
  const std::vector<int> targets = {0, 3, 2, 4};
  const std::vector<std::uint8_t> mask = {1, 1, 0, 1};

  auto forward = [&] {
    Tensor h = ops::gelu(ops::bias_add(ops::matmul(x, w1), b1));
    Tensor logits = ops::matmul(h, w2);
    return ops::cross_entropy(logits, targets, mask);
  };
  check_gradients(forward, {x, w1, b1, w2}, 40, rng);
}
