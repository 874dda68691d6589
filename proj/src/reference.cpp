#include "turbo/reference.hpp"

#include <cmath>

namespace turbo::ref {

namespace {

using Vec = std::vector<double>;

// y[n] (+)= x[m] * W[m,n]
void vecmat(Vec& y, const Vec& x, const std::vector<double>& w, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const double xv = x[static_cast<std::size_t>(i)];
    const double* wrow = w.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) y[static_cast<std::size_t>(j)] += xv * wrow[j];
  }
}

Vec linear(const Weights& w, const Vec& x, const std::string& wname, int m, int n, int layer,
           const char* target) {
  Vec y(static_cast<std::size_t>(n), 0.0);
  vecmat(y, x, w.params.at(wname), m, n);
  const std::string la = "lora.block" + std::to_string(layer) + "." + target + ".a";
  const std::string lb = "lora.block" + std::to_string(layer) + "." + target + ".b";
  if (w.has(la)) {
    const auto& a = w.params.at(la);
    const int r = static_cast<int>(a.size()) / m;
    Vec mid(static_cast<std::size_t>(r), 0.0);
    vecmat(mid, x, a, m, r);
    vecmat(y, mid, w.params.at(lb), r, n);
  }
  return y;
}

Vec rmsnorm(const Vec& x, const std::vector<double>& weight, double eps) {
  const int d = static_cast<int>(x.size());
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / d + eps);
  Vec y(x.size());
  for (int j = 0; j < d; ++j)
    y[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)] * inv *
                                     weight[static_cast<std::size_t>(j)];
  return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }

}  // namespace

Weights Weights::from_model(const Model& m) {
  Weights w;
  w.cfg = m.config();
  w.connections = m.spec().connections;
  w.alpha = m.spec().alpha;
  w.group_size = m.spec().group_size;
  for (const auto& [name, t] : m.parameters()) {
    Vec v(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) v[i] = static_cast<double>((*t.data)[i]);
    w.params[name] = std::move(v);
  }
  return w;
}

std::vector<std::vector<double>> forward_logits(const Weights& w,
                                                const std::vector<int>& tokens) {
  const ModelConfig& cfg = w.cfg;
  const int k = static_cast<int>(tokens.size());
  const int d = cfg.d_hidden, dkv = cfg.d_kv, di = cfg.d_inter;
  const int heads = cfg.n_heads, hd = dkv / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double eps = static_cast<double>(Model::kRmsEps);

  const auto& tok_emb = w.params.at("tok_emb");
  const auto& pos_emb = w.params.at("pos_emb");

  // h[level][token]: level 0 is the embedding, level l+1 the output of block l
  std::vector<std::vector<Vec>> h(static_cast<std::size_t>(cfg.n_layers) + 1);
  for (auto& lvl : h) lvl.resize(static_cast<std::size_t>(k));

  std::vector<std::vector<double>> logits(static_cast<std::size_t>(k));

  for (int i = 0; i < k; ++i) {
    Vec x(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j)
      x[static_cast<std::size_t>(j)] =
          tok_emb[static_cast<std::size_t>(tokens[static_cast<std::size_t>(i)]) * d + j] +
          pos_emb[static_cast<std::size_t>(i) * d + j];
    h[0][static_cast<std::size_t>(i)] = x;

    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      const Vec& input = h[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)];

      // attention over positions 0..i; K and V recomputed from stored inputs
      Vec att(static_cast<std::size_t>(dkv), 0.0);
      {
        Vec qn = rmsnorm(input, w.params.at(p + "norm1.w"), eps);
        Vec q = linear(w, qn, p + "wq", d, dkv, l, "q");
        std::vector<Vec> ks(static_cast<std::size_t>(i) + 1), vs(static_cast<std::size_t>(i) + 1);
        for (int j = 0; j <= i; ++j) {
          Vec jn = rmsnorm(h[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)],
                           w.params.at(p + "norm1.w"), eps);
          ks[static_cast<std::size_t>(j)] = linear(w, jn, p + "wk", d, dkv, l, "k");
          vs[static_cast<std::size_t>(j)] = linear(w, jn, p + "wv", d, dkv, l, "v");
        }
        for (int hh = 0; hh < heads; ++hh) {
          std::vector<double> scores(static_cast<std::size_t>(i) + 1);
          double mx = -1e300;
          for (int j = 0; j <= i; ++j) {
            double dot = 0.0;
            for (int e = 0; e < hd; ++e)
              dot += q[static_cast<std::size_t>(hh * hd + e)] *
                     ks[static_cast<std::size_t>(j)][static_cast<std::size_t>(hh * hd + e)];
            scores[static_cast<std::size_t>(j)] = dot * att_scale;
            mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
          }
          double sum = 0.0;
          for (int j = 0; j <= i; ++j) sum += std::exp(scores[static_cast<std::size_t>(j)] - mx);
          for (int j = 0; j <= i; ++j) {
            const double pj = std::exp(scores[static_cast<std::size_t>(j)] - mx) / sum;
            for (int e = 0; e < hd; ++e)
              att[static_cast<std::size_t>(hh * hd + e)] +=
                  pj * vs[static_cast<std::size_t>(j)][static_cast<std::size_t>(hh * hd + e)];
          }
        }
      }
      Vec ao = linear(w, att, p + "wo", dkv, d, l, "o");
      Vec x1(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j)
        x1[static_cast<std::size_t>(j)] = input[static_cast<std::size_t>(j)] +
                                          ao[static_cast<std::size_t>(j)];

      Vec m = rmsnorm(x1, w.params.at(p + "norm2.w"), eps);
      Vec gate = linear(w, m, p + "w_gate", d, di, l, "gate");
      Vec up = linear(w, m, p + "w_up", d, di, l, "up");
      Vec act(static_cast<std::size_t>(di));
      for (int j = 0; j < di; ++j)
        act[static_cast<std::size_t>(j)] = gelu(gate[static_cast<std::size_t>(j)]) *
                                           up[static_cast<std::size_t>(j)];
      Vec down = linear(w, act, p + "w_down", di, d, l, "down");
      Vec y(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j)
        y[static_cast<std::size_t>(j)] = x1[static_cast<std::size_t>(j)] +
                                         down[static_cast<std::size_t>(j)];

      // downward connections: h_l(i) += alpha * D(h_src(i - g))
      if (i >= w.group_size) {
        for (const Connection& c : w.connections) {
          if (c.dst != l) continue;
          const std::string cp =
              "conn." + std::to_string(c.src) + "->" + std::to_string(c.dst) + ".";
          const auto& a = w.params.at(cp + "a");
          const auto& ba = w.params.at(cp + "bias_a");
          const auto& b = w.params.at(cp + "b");
          const auto& bb = w.params.at(cp + "bias_b");
          const int r = static_cast<int>(ba.size());
          const Vec& src =
              h[static_cast<std::size_t>(c.src) + 1][static_cast<std::size_t>(i - w.group_size)];
          Vec mid = ba;
          vecmat(mid, src, a, d, r);
          Vec proj = bb;
          vecmat(proj, mid, b, r, d);
          for (int j = 0; j < d; ++j)
            y[static_cast<std::size_t>(j)] +=
                static_cast<double>(w.alpha) * proj[static_cast<std::size_t>(j)];
        }
      }
      h[static_cast<std::size_t>(l) + 1][static_cast<std::size_t>(i)] = std::move(y);
    }

    Vec fin = rmsnorm(h[static_cast<std::size_t>(cfg.n_layers)][static_cast<std::size_t>(i)],
                      w.params.at("final_norm.w"), eps);
    Vec lg(static_cast<std::size_t>(cfg.vocab_size), 0.0);
    vecmat(lg, fin, w.params.at("lm_head"), d, cfg.vocab_size);
    logits[static_cast<std::size_t>(i)] = std::move(lg);
  }
  return logits;
}

double loss(const Weights& w, const std::vector<int>& tokens, const std::vector<int>& targets,
            const std::vector<std::uint8_t>& mask) {
  const auto logits = forward_logits(w, tokens);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    const auto& row = logits[i];
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    total += std::log(sum) + mx - row[static_cast<std::size_t>(targets[i])];
    ++count;
  }
  return total / static_cast<double>(count);
}

}  // namespace turbo::ref
