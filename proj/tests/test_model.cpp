#include <doctest.h>

#include <cmath>
#include <set>

#include "testutil.hpp"
#include "turbo/analysis.hpp"
#include "turbo/model.hpp"
#include "turbo/reference.hpp"

using namespace turbo;

namespace {

ModelConfig tiny_config(int layers = 2, int d = 16, int heads = 2, int vocab = 13,
                        int max_seq = 32) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_hidden = d;
  c.n_heads = heads;
  c.d_kv = d;
  c.d_inter = 2 * d;
  c.vocab_size = vocab;
  c.max_seq = max_seq;
  return c;
}

std::vector<int> random_tokens(int k, int vocab, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(k));
  for (int& t : out) t = static_cast<int>(rng.uniform_int(0, vocab - 1));
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double mx = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    mx = std::max(mx, std::abs(static_cast<double>((*a.data)[i]) - (*b.data)[i]));
  return mx;
}

}  // namespace

TEST_CASE("config and spec validation") {
  ModelConfig c = tiny_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ParamError);

  ConnectionSpec s;
  s.connections = {{1, 1}};  // not strictly downward
  CHECK_THROWS_AS(s.validate(4), ParamError);
  s.connections = {{0, 1}};  // upward
  CHECK_THROWS_AS(s.validate(4), ParamError);
  s.connections = {{4, 0}};  // source beyond top block
  CHECK_THROWS_AS(s.validate(4), ParamError);
  s.connections = {{3, 0}, {3, 0}};  // duplicate
  CHECK_THROWS_AS(s.validate(4), ParamError);
  s.connections = {{3, 0}, {2, 1}};
  CHECK_NOTHROW(s.validate(4));
  s.alpha = -1.0f;
  CHECK_THROWS_AS(s.validate(4), ParamError);
}

TEST_CASE("connection presets carry the published tables") {
  const auto p1 = ConnectionSpec::preset("llama1b-15", 100.0f, 4, 120);
  CHECK(p1.connections.size() == 15);
  CHECK(std::set<Connection>(p1.connections.begin(), p1.connections.end())
            .count(Connection{6, 0}) == 1);
  CHECK_NOTHROW(p1.validate(16));

  const auto p2 = ConnectionSpec::preset("llama8b-45", 1.0f, 1, 120);
  CHECK(p2.connections.size() == 45);
  CHECK_NOTHROW(p2.validate(32));

  const auto p3 = ConnectionSpec::preset("qwen17b-21", 1.0f, 1, 120);
  CHECK(p3.connections.size() == 21);
  CHECK_NOTHROW(p3.validate(28));
  CHECK(std::set<Connection>(p3.connections.begin(), p3.connections.end())
            .count(Connection{27, 19}) == 1);

  CHECK_THROWS_AS(ConnectionSpec::preset("nosuch", 1.0f, 1, 1), ParamError);
}

TEST_CASE("connection table parsing") {
  const auto conns = ConnectionSpec::parse_table("3 -> 0  2 -> 1\n# comment\n3 -> 1\n");
  CHECK(conns.size() == 3);
  CHECK_THROWS_AS(ConnectionSpec::parse_table("3 => 0"), ParamError);
  CHECK_THROWS_AS(ConnectionSpec::parse_table("3 ->"), ParamError);
}

TEST_CASE("zero-initialized connections leave logits identical to the baseline") {
  Rng trial_rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(trial);
    const ModelConfig cfg = tiny_config(3, 24, 2, 11, 40);
    ConnectionSpec spec;
    spec.connections = {{2, 0}, {1, 0}, {2, 1}};
    spec.alpha = trial % 2 ? 100.0f : 1.0f;
    spec.group_size = 1 + trial % 3;
    spec.proj_rank = 5;

    const Model turbo_model(cfg, spec, seed);
    const Model base_model(cfg, ConnectionSpec{}, seed);

    const auto tokens = random_tokens(17, cfg.vocab_size, trial_rng);
    const Tensor lt = turbo_model.forward_grouped(tokens);
    const Tensor lb = base_model.forward_grouped(tokens);
    CHECK(max_abs_diff(lt, lb) <= 1e-6);
  }
}

TEST_CASE("grouped forward matches the serial reference at g = 1 and g > 1") {
  Rng rng(88);
  for (int g : {1, 2, 4}) {
    const ModelConfig cfg = tiny_config(3, 16, 2, 13, 40);
    ConnectionSpec spec;
    spec.connections = {{2, 0}, {2, 1}, {1, 0}};
    spec.alpha = 3.0f;  // make the connection path carry real signal
    spec.group_size = g;
    spec.proj_rank = 4;
    Model m(cfg, spec, 7);
    // zero-init would hide the connection path; give the projections values
    Rng wrng(17);
    for (auto& [name, t] : m.parameters())
      if (name.rfind("conn.", 0) == 0)
        for (auto& v : *t.data) v = static_cast<float>(wrng.normal()) * 0.05f;

    const auto tokens = random_tokens(11, cfg.vocab_size, rng);
    const Tensor logits = m.forward_grouped(tokens);
    const auto ref_logits = ref::forward_logits(ref::Weights::from_model(m), tokens);
    double mx = 0.0;
    for (int i = 0; i < 11; ++i)
      for (int v = 0; v < cfg.vocab_size; ++v)
        mx = std::max(mx, std::abs(static_cast<double>(
                              (*logits.data)[static_cast<std::size_t>(i) * cfg.vocab_size + v]) -
                          ref_logits[static_cast<std::size_t>(i)][static_cast<std::size_t>(v)]));
    INFO("g = ", g, " max diff ", mx);
    CHECK(mx <= 1e-5);
  }
}

TEST_CASE("causality: perturbing token j leaves positions before j unchanged") {
  Rng rng(99);
  const ModelConfig cfg = tiny_config(2, 16, 2, 13, 40);
  ConnectionSpec spec;
  spec.connections = {{1, 0}};
  spec.alpha = 2.0f;
  spec.group_size = 3;
  Model m(cfg, spec, 5);
  Rng wrng(18);
  for (auto& [name, t] : m.parameters())
    if (name.rfind("conn.", 0) == 0)
      for (auto& v : *t.data) v = static_cast<float>(wrng.normal()) * 0.05f;

  auto tokens = random_tokens(13, cfg.vocab_size, rng);
  const Tensor before = m.forward_grouped(tokens);
  for (int j : {4, 7, 12}) {
    auto perturbed = tokens;
    perturbed[static_cast<std::size_t>(j)] = (perturbed[static_cast<std::size_t>(j)] + 1) %
                                             cfg.vocab_size;
    const Tensor after = m.forward_grouped(perturbed);
    for (int i = 0; i < j; ++i)
      for (int v = 0; v < cfg.vocab_size; ++v) {
        const std::size_t idx = static_cast<std::size_t>(i) * cfg.vocab_size +
                                static_cast<std::size_t>(v);
        CHECK(std::abs((*before.data)[idx] - (*after.data)[idx]) <= 1e-6f);
      }
  }
}

TEST_CASE("layer_block: zero weights reduce to the residual identity") {
  const ModelConfig cfg = tiny_config(1, 8, 2, 7, 16);
  Model m(cfg, ConnectionSpec{}, 3);
  for (auto& [name, t] : m.parameters()) {
    if (name.rfind("block0.w", 0) == 0)
      for (auto& v : *t.data) v = 0.0f;
  }
  Rng rng(4);
  const Tensor x = Tensor::randn({2, 3, 8}, rng, 1.0f);
  KvCache kv(1);
  const Tensor y = m.layer_block(0, x, kv, 0);
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("layer_block rejects a cache inconsistent with the position offset") {
  const ModelConfig cfg = tiny_config(1, 8, 2, 7, 16);
  Model m(cfg, ConnectionSpec{}, 3);
  Rng rng(4);
  const Tensor x = Tensor::randn({1, 2, 8}, rng, 1.0f);
  KvCache kv(1);
  CHECK_THROWS_AS(m.layer_block(0, x, kv, 5), StateError);
  CHECK_NOTHROW(m.layer_block(0, x, kv, 0));
  // cache now holds 2 positions; offset must be 2
  CHECK_THROWS_AS(m.layer_block(0, x, kv, 0), StateError);
  CHECK_NOTHROW(m.layer_block(0, x, kv, 2));
}

TEST_CASE("forward_grouped performs exactly ceil(k/g) group iterations") {
  const ModelConfig cfg = tiny_config(1, 8, 2, 7, 64);
  Rng rng(6);
  for (int g : {1, 2, 3, 5, 9}) {
    ConnectionSpec spec;
    spec.group_size = g;
    Model m(cfg, spec, 1);
    for (int k : {1, 4, 9, 10}) {
      ForwardStats stats;
      m.forward_batch({random_tokens(k, cfg.vocab_size, rng)}, g, &stats);
      CHECK(stats.group_iterations == analysis::sequential_steps(k, g));
    }
  }
}

TEST_CASE("forward input validation") {
  const ModelConfig cfg = tiny_config();
  Model m(cfg, ConnectionSpec{}, 1);
  CHECK_THROWS_AS(m.forward_grouped({}), ParamError);
  Rng rng(1);
  CHECK_THROWS_AS(m.forward_batch({random_tokens(cfg.max_seq + 1, cfg.vocab_size, rng)}, 1),
                  ParamError);
  CHECK_THROWS_AS(m.forward_batch({{1, 2}, {1}}, 1), ParamError);  // ragged
}

TEST_CASE("end-to-end gradients vs finite differences on the double reference") {
  // L=3, d=16, k=9 per the gradient acceptance setup; probes live in the
  // double-precision reference weights so they carry no fp32 quantization
  Rng rng(123);
  for (int g : {1, 2, 4}) {
    for (float alpha : {1.0f, 100.0f}) {
      const ModelConfig cfg = tiny_config(3, 16, 2, 13, 16);
      ConnectionSpec spec;
      spec.connections = {{2, 0}, {1, 0}};
      spec.alpha = alpha;
      spec.group_size = g;
      spec.proj_rank = 4;
      Model m(cfg, spec, 21);
      // non-zero connection weights so the alpha-scaled path carries gradient
      Rng wrng(31);
      for (auto& [name, t] : m.parameters())
        if (name.rfind("conn.", 0) == 0)
          for (auto& v : *t.data)
            v = static_cast<float>(wrng.normal()) * (alpha > 1.0f ? 0.002f : 0.05f);

      const auto tokens = random_tokens(9, cfg.vocab_size, rng);
      std::vector<int> targets(9);
      std::vector<std::uint8_t> mask(9, 0);
      for (int i = 0; i < 9; ++i)
        targets[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(0, 12));
      mask[4] = mask[6] = mask[8] = 1;

      // analytic gradients through the fp32 tape
      auto params = m.trainable_parameters();
      for (auto& [name, t] : params) t.zero_grad();
      Tape tape;
      {
        TapeScope scope(tape);
        Tensor logits = m.forward_batch({tokens}, g);
        Tensor flat = logits.reshaped({9, cfg.vocab_size});
        Tensor loss = ops::cross_entropy(flat, targets, mask);
        loss.grad_ptr()[0] = 1.0f;
        tape.backward();
      }

      // finite differences on the double reference
      ref::Weights w = ref::Weights::from_model(m);
      const double eps = 1e-4;
      int checked = 0;
      for (auto& [name, t] : params) {
        Rng pick(mix_seed(555, checked));
        const int npts = std::min<int>(6, static_cast<int>(t.numel()));
        for (int p = 0; p < npts; ++p) {
          const std::size_t idx = static_cast<std::size_t>(
              pick.uniform_int(0, static_cast<std::int64_t>(t.numel()) - 1));
          auto& wp = w.params.at(name);
          const double orig = wp[idx];
          wp[idx] = orig + eps;
          const double jp = ref::loss(w, tokens, targets, mask);
          wp[idx] = orig - eps;
          const double jm = ref::loss(w, tokens, targets, mask);
          wp[idx] = orig;
          const double fd = (jp - jm) / (2.0 * eps);
          const double an = static_cast<double>(t.grad_ptr()[idx]);
          const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2});
          INFO("g ", g, " alpha ", alpha, " param ", name, " idx ", idx, " an ", an, " fd ", fd);
          CHECK(err <= 1e-3);
        }
        ++checked;
      }
    }
  }
}

TEST_CASE("generate: determinism and zero-init equivalence with the baseline") {
  const ModelConfig cfg = tiny_config(2, 16, 2, 13, 48);
  ConnectionSpec spec;
  spec.connections = {{1, 0}};
  spec.group_size = 2;
  const Model turbo_model(cfg, spec, 9);
  const Model base_model(cfg, ConnectionSpec{}, 9);

  Rng prng(41);
  const auto prompt = random_tokens(7, cfg.vocab_size, prng);

  Rng r1(123), r2(123), r3(123);
  const auto out1 = turbo_model.generate(prompt, 10, 1.0f, r1);
  const auto out2 = turbo_model.generate(prompt, 10, 1.0f, r2);
  const auto out3 = base_model.generate(prompt, 10, 1.0f, r3);
  CHECK(out1 == out2);
  CHECK(out1 == out3);

  CHECK_THROWS_AS(turbo_model.generate({}, 5, 1.0f, r1), ParamError);
  const auto long_prompt = random_tokens(cfg.max_seq + 1, cfg.vocab_size, prng);
  CHECK_THROWS_AS(turbo_model.generate(long_prompt, 5, 1.0f, r1), ParamError);
}

TEST_CASE("generate: uniform logits sample uniformly (multinomial 3-sigma)") {
  ModelConfig cfg = tiny_config(1, 8, 1, 10, 8);
  Model m(cfg, ConnectionSpec{}, 2);
  // zero lm_head forces exactly uniform next-token logits
  for (auto& [name, t] : m.parameters())
    if (name == "lm_head")
      for (auto& v : *t.data) v = 0.0f;

  Rng rng(7);
  std::vector<int> counts(10, 0);
  const std::vector<int> prompt = {3};
  for (int i = 0; i < 10000; ++i) {
    const auto out = m.generate(prompt, 1, 1.0f, rng);
    REQUIRE(out.size() == 2);
    ++counts[static_cast<std::size_t>(out[1])];
  }
  // binomial: mean 1000, sigma = sqrt(n p (1-p)) = 30
  for (int v = 0; v < 10; ++v) CHECK(std::abs(counts[static_cast<std::size_t>(v)] - 1000) <= 90);
}

TEST_CASE("soft-token: lambda 0 reproduces the baseline forward") {
  const ModelConfig cfg = tiny_config(2, 16, 2, 13, 32);
  const Model m(cfg, ConnectionSpec{}, 11);
  Rng rng(15);
  const auto tokens = random_tokens(9, cfg.vocab_size, rng);
  const Tensor soft = m.forward_soft_token(tokens, 0.0f);
  const Tensor base = m.forward_grouped(tokens);
  CHECK(max_abs_diff(soft, base) <= 1e-6);
  CHECK_THROWS_AS(m.forward_soft_token(tokens, -0.1f), ParamError);
  CHECK_THROWS_AS(m.forward_soft_token(tokens, 1.1f), ParamError);
}

TEST_CASE("soft-token blend: one-hot and uniform closed forms") {
  const ModelConfig cfg = tiny_config(1, 8, 1, 6, 8);
  const Model m(cfg, ConnectionSpec{}, 13);
  const Tensor& emb = m.tok_emb();

  // one-hot previous distribution on token j collapses the sum to Emb(j)
  const int token = 2, j = 4;
  Tensor onehot = Tensor::zeros({6});
  (*onehot.data)[static_cast<std::size_t>(j)] = 1.0f;
  const Tensor blend = m.soft_blend(token, onehot, 0.1f);
  for (int e = 0; e < 8; ++e) {
    const float expect = 0.9f * (*emb.data)[static_cast<std::size_t>(token) * 8 + e] +
                         0.1f * (*emb.data)[static_cast<std::size_t>(j) * 8 + e];
    CHECK(std::abs((*blend.data)[static_cast<std::size_t>(e)] - expect) <= 1e-6f);
  }

  // uniform distribution yields the mean embedding row (direct summation)
  const Tensor unif = Tensor::full({6}, 1.0f / 6.0f);
  const Tensor blend2 = m.soft_blend(token, unif, 0.1f);
  for (int e = 0; e < 8; ++e) {
    double mean = 0.0;
    for (int vv = 0; vv < 6; ++vv) mean += (*emb.data)[static_cast<std::size_t>(vv) * 8 + e];
    mean /= 6.0;
    const float expect = 0.9f * (*emb.data)[static_cast<std::size_t>(token) * 8 + e] +
                         0.1f * static_cast<float>(mean);
    CHECK(std::abs((*blend2.data)[static_cast<std::size_t>(e)] - expect) <= 1e-6f);
  }
}

TEST_CASE("attach_lora: zero-init adapters leave the forward unchanged") {
  const ModelConfig cfg = tiny_config(2, 16, 2, 13, 32);
  Model plain(cfg, ConnectionSpec{}, 17);
  Model adapted(cfg, ConnectionSpec{}, 17);
  adapted.attach_lora(4, {"q", "k", "v", "o", "gate", "up", "down"});

  Rng rng(19);
  const auto tokens = random_tokens(8, cfg.vocab_size, rng);
  CHECK(max_abs_diff(plain.forward_grouped(tokens), adapted.forward_grouped(tokens)) <= 1e-6);

  CHECK_THROWS_AS(adapted.attach_lora(4, {"q"}), StateError);
  Model other(cfg, ConnectionSpec{}, 17);
  CHECK_THROWS_AS(other.attach_lora(4, {"query"}), ParamError);
  CHECK_THROWS_AS(other.attach_lora(0, {"q"}), ParamError);
}

TEST_CASE("attach_lora freezes base weights and the count matches the analysis formulas") {
  const ModelConfig cfg = tiny_config(3, 16, 2, 13, 32);
  ConnectionSpec spec;
  spec.connections = {{2, 0}, {2, 1}};
  spec.proj_rank = 5;
  Model m(cfg, spec, 23);
  m.attach_lora(4, {"q", "k", "v", "o", "gate", "up", "down"});

  for (const auto& [name, t] : m.trainable_parameters()) {
    const bool is_adapter = name.rfind("lora.", 0) == 0 || name.rfind("conn.", 0) == 0;
    INFO("unexpected trainable parameter: ", name);
    CHECK(is_adapter);
  }
  const auto pc = analysis::count_params(cfg.d_hidden, cfg.d_kv, cfg.d_inter, cfg.n_layers, 4,
                                         2, spec.proj_rank);
  CHECK(m.trainable_param_count() == pc.turboconn_total);
}

TEST_CASE("lora adapter gradients on a tiny model") {
  Rng rng(222);
  const ModelConfig cfg = tiny_config(2, 12, 2, 11, 16);
  Model m(cfg, ConnectionSpec{}, 29);
  m.attach_lora(3, {"q", "gate"});
  // give B matrices values so their inputs see gradient too
  Rng wrng(37);
  for (auto& [name, t] : m.parameters())
    if (name.rfind("lora.", 0) == 0)
      for (auto& v : *t.data) v = static_cast<float>(wrng.normal()) * 0.05f;

  const auto tokens = random_tokens(6, cfg.vocab_size, rng);
  std::vector<int> targets(6, 3);
  std::vector<std::uint8_t> mask(6, 1);

  auto params = m.trainable_parameters();
  for (auto& [name, t] : params) t.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor logits = m.forward_batch({tokens}, 1);
    Tensor loss = ops::cross_entropy(logits.reshaped({6, cfg.vocab_size}), targets, mask);
    loss.grad_ptr()[0] = 1.0f;
    tape.backward();
  }
  ref::Weights w = ref::Weights::from_model(m);
  const double eps = 1e-4;
  for (auto& [name, t] : params) {
    REQUIRE(name.rfind("lora.", 0) == 0);
    for (std::size_t idx : {std::size_t{0}, t.numel() / 2, t.numel() - 1}) {
      auto& wp = w.params.at(name);
      const double orig = wp[idx];
      wp[idx] = orig + eps;
      const double jp = ref::loss(w, tokens, targets, mask);
      wp[idx] = orig - eps;
      const double jm = ref::loss(w, tokens, targets, mask);
      wp[idx] = orig;
      const double fd = (jp - jm) / (2.0 * eps);
      const double an = static_cast<double>(t.grad_ptr()[idx]);
      CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2}) <= 1e-3);
    }
  }
}

TEST_CASE("DownCache serves exactly the position i - g") {
  DownCache dc;
  Rng rng(3);
  const Tensor c0 = Tensor::randn({1, 3, 4}, rng, 1.0f);
  const Tensor c1 = Tensor::randn({1, 3, 4}, rng, 1.0f);
  dc.push(2, 0, c0);
  dc.push(2, 3, c1);
  // positions 1..3 span both chunks
  const Tensor f = dc.fetch(2, 1, 3);
  CHECK(f.shape == std::vector<int>{1, 3, 4});
  for (int e = 0; e < 4; ++e) {
    CHECK((*f.data)[static_cast<std::size_t>(e)] == (*c0.data)[static_cast<std::size_t>(4 + e)]);
    CHECK((*f.data)[static_cast<std::size_t>(8 + e)] == (*c1.data)[static_cast<std::size_t>(e)]);
  }
  CHECK_THROWS_AS(dc.fetch(2, 5, 2), StateError);  // beyond cached range
  CHECK_THROWS_AS(dc.fetch(0, 0, 1), StateError);  // unknown layer
  dc.prune_before(3);
  CHECK_THROWS_AS(dc.fetch(2, 0, 1), StateError);  // pruned
  CHECK_NOTHROW(dc.fetch(2, 3, 3));
}
