#include "turbo/model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace turbo {

void ModelConfig::validate() const {
  if (n_layers < 1 || d_hidden < 1 || n_heads < 1 || d_kv < 1 || d_inter < 1 ||
      vocab_size < 1 || max_seq < 1)
    throw ParamError("ModelConfig: all dimensions must be >= 1");
  if (d_hidden % n_heads != 0)
    throw ParamError("ModelConfig: d_hidden " + std::to_string(d_hidden) +
                     " not divisible by n_heads " + std::to_string(n_heads));
  if (d_kv % n_heads != 0)
    throw ParamError("ModelConfig: d_kv " + std::to_string(d_kv) + " not divisible by n_heads " +
                     std::to_string(n_heads));
}

void ConnectionSpec::validate(int n_layers) const {
  if (alpha < 0.0f) throw ParamError("ConnectionSpec: alpha must be >= 0");
  if (group_size < 1) throw ParamError("ConnectionSpec: group_size must be >= 1");
  if (proj_rank < 1) throw ParamError("ConnectionSpec: proj_rank must be >= 1");
  std::set<std::pair<int, int>> seen;
  for (const Connection& c : connections) {
    if (!(0 <= c.dst && c.dst < c.src && c.src <= n_layers - 1))
      throw ParamError("ConnectionSpec: connection " + std::to_string(c.src) + " -> " +
                       std::to_string(c.dst) + " is not strictly downward within " +
                       std::to_string(n_layers) + " layers");
    if (!seen.insert({c.src, c.dst}).second)
      throw ParamError("ConnectionSpec: duplicate connection " + std::to_string(c.src) + " -> " +
                       std::to_string(c.dst));
  }
}

namespace {
const char* kLlama1bTable =
    "6 -> 0     8 -> 0     8 -> 2     10 -> 0    10 -> 2\n"
    "10 -> 4    12 -> 0    12 -> 2    12 -> 4    12 -> 6\n"
    "14 -> 0    14 -> 2    14 -> 4    14 -> 6    14 -> 8\n";

const char* kLlama8bTable =
    "14 -> 7    16 -> 7    16 -> 9    18 -> 7    18 -> 9\n"
    "18 -> 11   20 -> 7    20 -> 9    20 -> 11   20 -> 13\n"
    "22 -> 7    22 -> 9    22 -> 11   22 -> 13   22 -> 15\n"
    "24 -> 7    24 -> 9    24 -> 11   24 -> 13   24 -> 15\n"
    "24 -> 17   26 -> 7    26 -> 9    26 -> 11   26 -> 13\n"
    "26 -> 15   26 -> 17   26 -> 19   28 -> 7    28 -> 9\n"
    "28 -> 11   28 -> 13   28 -> 15   28 -> 17   28 -> 19\n"
    "28 -> 21   30 -> 7    30 -> 9    30 -> 11   30 -> 13\n"
    "30 -> 15   30 -> 17   30 -> 19   30 -> 21   30 -> 23\n";

const char* kQwen17bTable =
    "12 -> 4    15 -> 4    15 -> 7    18 -> 4    18 -> 7\n"
    "18 -> 10   21 -> 4    21 -> 7    21 -> 10   21 -> 13\n"
    "24 -> 4    24 -> 7    24 -> 10   24 -> 13   24 -> 16\n"
    "27 -> 4    27 -> 7    27 -> 10   27 -> 13   27 -> 16\n"
    "27 -> 19\n";
}  // namespace

ConnectionSpec ConnectionSpec::preset(const std::string& name, float alpha, int group_size,
                                      int proj_rank) {
  ConnectionSpec spec;
  spec.alpha = alpha;
  spec.group_size = group_size;
  spec.proj_rank = proj_rank;
  if (name == "llama1b-15")
    spec.connections = parse_table(kLlama1bTable);
  else if (name == "llama8b-45")
    spec.connections = parse_table(kLlama8bTable);
  else if (name == "qwen17b-21")
    spec.connections = parse_table(kQwen17bTable);
  else
    throw ParamError("unknown connection preset '" + name +
                     "' (expected llama1b-15, llama8b-45 or qwen17b-21)");
  return spec;
}

std::vector<Connection> ConnectionSpec::parse_table(const std::string& text) {
  std::vector<Connection> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    int src = 0, dst = 0;
    std::string arrow;
    while (ls >> src) {
      if (!(ls >> arrow) || arrow != "->" || !(ls >> dst))
        throw ParamError("connection table line " + std::to_string(lineno) +
                         ": expected 'src -> dst' pairs");
      out.push_back({src, dst});
    }
    std::string rest;
    ls.clear();
    if (ls >> rest)
      throw ParamError("connection table line " + std::to_string(lineno) + ": trailing token '" +
                       rest + "'");
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Connection> ConnectionSpec::load_table_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open connection file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_table(ss.str());
}

void KvCache::append(int layer, const Tensor& k, const Tensor& v) {
  keys_.at(layer).push_back(k);
  values_.at(layer).push_back(v);
}

int KvCache::length(int layer) const {
  int total = 0;
  for (const Tensor& k : keys_.at(layer)) total += k.dim(1);
  return total;
}

void DownCache::push(int source_layer, int start_pos, const Tensor& h) {
  chunks_[source_layer].push_back({start_pos, h});
}

Tensor DownCache::fetch(int source_layer, int start, int count) const {
  const auto it = chunks_.find(source_layer);
  if (it == chunks_.end())
    throw StateError("DownCache: no hidden states cached for layer " +
                     std::to_string(source_layer));
  std::vector<Tensor> parts;
  int need = start;
  const int end = start + count;
  for (const Chunk& ch : it->second) {
    const int ch_end = ch.start + ch.h.dim(1);
    if (ch_end <= need || ch.start >= end) continue;
    const int lo = std::max(need, ch.start);
    const int hi = std::min(end, ch_end);
    if (lo != need)
      throw StateError("DownCache: gap at position " + std::to_string(need) + " for layer " +
                       std::to_string(source_layer));
    if (lo == ch.start && hi == ch_end)
      parts.push_back(ch.h);
    else
      parts.push_back(ops::slice_seq(ch.h, lo - ch.start, hi - lo));
    need = hi;
    if (need == end) break;
  }
  if (need != end)
    throw StateError("DownCache: positions [" + std::to_string(start) + "," +
                     std::to_string(end) + ") not cached for layer " +
                     std::to_string(source_layer));
  if (parts.size() == 1) return parts[0];
  return ops::concat_seq(parts);
}

void DownCache::prune_before(int pos) {
  for (auto& [layer, dq] : chunks_) {
    while (!dq.empty() && dq.front().start + dq.front().h.dim(1) <= pos) dq.pop_front();
  }
}

Model::Model(const ModelConfig& cfg, const ConnectionSpec& spec, std::uint64_t seed)
    : cfg_(cfg), spec_(spec) {
  cfg_.validate();
  spec_.validate(cfg_.n_layers);

  Rng rng(seed);
  constexpr float kStd = 0.02f;
  tok_emb_ = Tensor::randn({cfg_.vocab_size, cfg_.d_hidden}, rng, kStd, true);
  pos_emb_ = Tensor::randn({cfg_.max_seq, cfg_.d_hidden}, rng, kStd, true);
  final_norm_w_ = Tensor::full({cfg_.d_hidden}, 1.0f, true);
  lm_head_ = Tensor::randn({cfg_.d_hidden, cfg_.vocab_size}, rng, kStd, true);

  blocks_.resize(static_cast<std::size_t>(cfg_.n_layers));
  for (Block& blk : blocks_) {
    blk.norm1_w = Tensor::full({cfg_.d_hidden}, 1.0f, true);
    blk.wq = Tensor::randn({cfg_.d_hidden, cfg_.d_kv}, rng, kStd, true);
    blk.wk = Tensor::randn({cfg_.d_hidden, cfg_.d_kv}, rng, kStd, true);
    blk.wv = Tensor::randn({cfg_.d_hidden, cfg_.d_kv}, rng, kStd, true);
    blk.wo = Tensor::randn({cfg_.d_kv, cfg_.d_hidden}, rng, kStd, true);
    blk.norm2_w = Tensor::full({cfg_.d_hidden}, 1.0f, true);
    blk.w_gate = Tensor::randn({cfg_.d_hidden, cfg_.d_inter}, rng, kStd, true);
    blk.w_up = Tensor::randn({cfg_.d_hidden, cfg_.d_inter}, rng, kStd, true);
    blk.w_down = Tensor::randn({cfg_.d_inter, cfg_.d_hidden}, rng, kStd, true);
  }

  for (std::size_t ci = 0; ci < spec_.connections.size(); ++ci) {
    const Connection& c = spec_.connections[ci];
    DownProjection dp;
    // b and both biases start at zero so the projection is the zero map;
    // a stays random so b receives a usable gradient at the first step
    dp.a = Tensor::randn({cfg_.d_hidden, spec_.proj_rank}, rng, kStd, true);
    dp.bias_a = Tensor::zeros({spec_.proj_rank}, true);
    dp.b = Tensor::zeros({spec_.proj_rank, cfg_.d_hidden}, true);
    dp.bias_b = Tensor::zeros({cfg_.d_hidden}, true);
    down_projs_.push_back(std::move(dp));
    conns_by_dest_[c.dst].push_back(static_cast<int>(ci));
    source_layers_.insert(c.src);
  }
}

const LoraAdapter* Model::adapter(int layer, const std::string& target) const {
  const auto it = adapters_.find("block" + std::to_string(layer) + "." + target);
  return it == adapters_.end() ? nullptr : &it->second;
}

Tensor Model::linear(const Tensor& x2d, const Tensor& w, int layer, const char* target) const {
  Tensor y = ops::matmul(x2d, w);
  const LoraAdapter* ad = adapter(layer, target);
  if (ad) y = ops::add(y, ops::matmul(ops::matmul(x2d, ad->a), ad->b));
  return y;
}

Tensor Model::layer_block(int layer, const Tensor& x, KvCache& kv, int pos_offset) const {
  if (layer < 0 || layer >= cfg_.n_layers)
    throw ParamError("layer_block: layer " + std::to_string(layer) + " out of range");
  const int b = x.dim(0), t = x.dim(1);
  if (x.dim(2) != cfg_.d_hidden)
    throw DimensionError("layer_block: hidden width " + x.shape_str());
  if (kv.length(layer) != pos_offset)
    throw StateError("layer_block: cache holds " + std::to_string(kv.length(layer)) +
                     " positions for layer " + std::to_string(layer) +
                     " but position offset is " + std::to_string(pos_offset));

  const Block& blk = blocks_[static_cast<std::size_t>(layer)];
  Tensor h = ops::rmsnorm(x, blk.norm1_w, kRmsEps);
  Tensor h2 = h.reshaped({b * t, cfg_.d_hidden});
  Tensor q = linear(h2, blk.wq, layer, "q").reshaped({b, t, cfg_.d_kv});
  Tensor k = linear(h2, blk.wk, layer, "k").reshaped({b, t, cfg_.d_kv});
  Tensor v = linear(h2, blk.wv, layer, "v").reshaped({b, t, cfg_.d_kv});
  kv.append(layer, k, v);

  Tensor att = ops::masked_attention(q, kv.keys(layer), kv.values(layer), cfg_.n_heads,
                                     pos_offset);
  Tensor ao = linear(att.reshaped({b * t, cfg_.d_kv}), blk.wo, layer, "o")
                  .reshaped({b, t, cfg_.d_hidden});
  Tensor x1 = ops::add(x, ao);

  Tensor m = ops::rmsnorm(x1, blk.norm2_w, kRmsEps);
  Tensor m2 = m.reshaped({b * t, cfg_.d_hidden});
  Tensor gate = linear(m2, blk.w_gate, layer, "gate");
  Tensor up = linear(m2, blk.w_up, layer, "up");
  Tensor mm = ops::mul(ops::gelu(gate), up);
  Tensor down = linear(mm, blk.w_down, layer, "down").reshaped({b, t, cfg_.d_hidden});
  return ops::add(x1, down);
}

Tensor Model::embed_group(const std::vector<std::vector<int>>& tokens, int pos, int count) const {
  const int b = static_cast<int>(tokens.size());
  std::vector<int> tok_ids, pos_ids;
  tok_ids.reserve(static_cast<std::size_t>(b) * count);
  pos_ids.reserve(static_cast<std::size_t>(b) * count);
  for (int bi = 0; bi < b; ++bi) {
    for (int ti = 0; ti < count; ++ti) {
      tok_ids.push_back(tokens[static_cast<std::size_t>(bi)][static_cast<std::size_t>(pos + ti)]);
      pos_ids.push_back(pos + ti);
    }
  }
  Tensor te = ops::embedding(tok_emb_, tok_ids);
  Tensor pe = ops::embedding(pos_emb_, pos_ids);
  return ops::add(te, pe).reshaped({b, count, cfg_.d_hidden});
}

Tensor Model::head_logits(const Tensor& x) const {
  const int b = x.dim(0), t = x.dim(1);
  Tensor n = ops::rmsnorm(x, final_norm_w_, kRmsEps);
  return ops::matmul(n.reshaped({b * t, cfg_.d_hidden}), lm_head_)
      .reshaped({b, t, cfg_.vocab_size});
}

Tensor Model::apply_connections(const Tensor& y, int dst_layer, const DownCache& dcache, int pos,
                                int count) const {
  const auto it = conns_by_dest_.find(dst_layer);
  if (it == conns_by_dest_.end()) return y;
  const int batch = y.dim(0);
  Tensor out = y;
  for (int ci : it->second) {
    const Connection& c = spec_.connections[static_cast<std::size_t>(ci)];
    const DownProjection& dp = down_projs_[static_cast<std::size_t>(ci)];
    Tensor src = dcache.fetch(c.src, pos - spec_.group_size, count);
    Tensor s2 = src.reshaped({batch * count, cfg_.d_hidden});
    Tensor proj = ops::bias_add(ops::matmul(s2, dp.a), dp.bias_a);
    proj = ops::bias_add(ops::matmul(proj, dp.b), dp.bias_b);
    out = ops::add(out, ops::scale(proj.reshaped({batch, count, cfg_.d_hidden}), spec_.alpha));
  }
  return out;
}

Tensor Model::forward_batch(const std::vector<std::vector<int>>& tokens, int group_size,
                            ForwardStats* stats) const {
  if (tokens.empty() || tokens[0].empty()) throw ParamError("forward: empty token sequence");
  const int k = static_cast<int>(tokens[0].size());
  for (const auto& row : tokens)
    if (static_cast<int>(row.size()) != k)
      throw ParamError("forward: ragged batch; pad sequences to a common length");
  if (k > cfg_.max_seq)
    throw ParamError("forward: sequence length " + std::to_string(k) + " exceeds max_seq " +
                     std::to_string(cfg_.max_seq));
  if (group_size < 1) throw ParamError("forward: group size must be >= 1");

  const int g = group_size;
  KvCache kv(cfg_.n_layers);
  DownCache dcache;
  std::vector<Tensor> logit_parts;
  int iterations = 0;

  for (int pos = 0; pos < k; pos += g) {
    const int count = std::min(g, k - pos);
    ++iterations;
    Tensor x = embed_group(tokens, pos, count);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      Tensor y = layer_block(l, x, kv, pos);
      if (pos >= g) y = apply_connections(y, l, dcache, pos, count);
      if (source_layers_.count(l)) dcache.push(l, pos, y);
      x = y;
    }
    dcache.prune_before(pos);
    logit_parts.push_back(head_logits(x));
  }
  if (stats) stats->group_iterations = iterations;
  if (logit_parts.size() == 1) return logit_parts[0];
  return ops::concat_seq(logit_parts);
}

Tensor Model::forward_grouped(const std::vector<int>& tokens, ForwardStats* stats) const {
  Tensor out = forward_batch({tokens}, spec_.group_size, stats);
  return out.reshaped({static_cast<int>(tokens.size()), cfg_.vocab_size});
}

Tensor Model::soft_blend(int token_id, const Tensor& prev_probs, float lambda) const {
  if (lambda < 0.0f || lambda > 1.0f)
    throw ParamError("soft_blend: lambda must lie in [0,1]");
  Tensor e = ops::embedding(tok_emb_, {token_id});
  if (lambda == 0.0f) return e.reshaped({cfg_.d_hidden});
  Tensor probs2 = prev_probs.reshaped({1, cfg_.vocab_size});
  Tensor mix = ops::matmul(probs2, tok_emb_);
  return ops::add(ops::scale(e, 1.0f - lambda), ops::scale(mix, lambda))
      .reshaped({cfg_.d_hidden});
}

Tensor Model::forward_soft_batch(const std::vector<std::vector<int>>& tokens,
                                 float lambda) const {
  if (lambda < 0.0f || lambda > 1.0f)
    throw ParamError("forward_soft_token: lambda must lie in [0,1]");
  if (tokens.empty() || tokens[0].empty()) throw ParamError("forward: empty token sequence");
  const int b = static_cast<int>(tokens.size());
  const int k = static_cast<int>(tokens[0].size());
  for (const auto& row : tokens)
    if (static_cast<int>(row.size()) != k)
      throw ParamError("forward: ragged batch; pad sequences to a common length");
  if (k > cfg_.max_seq)
    throw ParamError("forward: sequence length " + std::to_string(k) + " exceeds max_seq " +
                     std::to_string(cfg_.max_seq));

  KvCache kv(cfg_.n_layers);
  std::vector<Tensor> logit_parts;
  Tensor prev_probs;  // [b, vocab]

  for (int pos = 0; pos < k; ++pos) {
    std::vector<int> ids(static_cast<std::size_t>(b));
    std::vector<int> pos_ids(static_cast<std::size_t>(b), pos);
    for (int bi = 0; bi < b; ++bi) ids[static_cast<std::size_t>(bi)] =
        tokens[static_cast<std::size_t>(bi)][static_cast<std::size_t>(pos)];
    Tensor e = ops::embedding(tok_emb_, ids);  // [b, d]
    Tensor x2;
    if (pos == 0 || lambda == 0.0f) {
      x2 = e;
    } else {
      Tensor mix = ops::matmul(prev_probs, tok_emb_);  // [b, d]
      x2 = ops::add(ops::scale(e, 1.0f - lambda), ops::scale(mix, lambda));
    }
    Tensor pe = ops::embedding(pos_emb_, pos_ids);
    Tensor x = ops::add(x2, pe).reshaped({b, 1, cfg_.d_hidden});
    for (int l = 0; l < cfg_.n_layers; ++l) x = layer_block(l, x, kv, pos);
    Tensor logits = head_logits(x);  // [b, 1, vocab]
    logit_parts.push_back(logits);
    prev_probs = ops::softmax(logits.reshaped({b, cfg_.vocab_size}), 1.0f);
  }
  if (logit_parts.size() == 1) return logit_parts[0];
  return ops::concat_seq(logit_parts);
}

Tensor Model::forward_soft_token(const std::vector<int>& tokens, float lambda) const {
  Tensor out = forward_soft_batch({tokens}, lambda);
  return out.reshaped({static_cast<int>(tokens.size()), cfg_.vocab_size});
}

namespace {
int sample_from_logits(const Tensor& logits_row, float temperature, Rng& rng) {
  Tensor probs = ops::softmax(logits_row, temperature);
  return static_cast<int>(rng.categorical({probs.ptr(), probs.numel()}));
}
}  // namespace

std::vector<int> Model::generate(const std::vector<int>& prompt, int max_new, float temperature,
                                 Rng& rng, int eos_id) const {
  if (prompt.empty()) throw ParamError("generate: prompt must be nonempty");
  if (static_cast<int>(prompt.size()) > cfg_.max_seq)
    throw ParamError("generate: prompt length " + std::to_string(prompt.size()) +
                     " exceeds max_seq " + std::to_string(cfg_.max_seq));

  const int g = spec_.group_size;
  KvCache kv(cfg_.n_layers);
  DownCache dcache;
  std::vector<std::vector<int>> batch = {prompt};
  const int kp = static_cast<int>(prompt.size());

  auto run_group = [&](const Tensor& input, int pos, int count) -> Tensor {
    Tensor x = input;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      Tensor y = layer_block(l, x, kv, pos);
      if (pos >= g) y = apply_connections(y, l, dcache, pos, count);
      if (source_layers_.count(l)) dcache.push(l, pos, y);
      x = y;
    }
    dcache.prune_before(pos + count - g);
    return head_logits(x);
  };

  Tensor last_logits;
  for (int pos = 0; pos < kp; pos += g) {
    const int count = std::min(g, kp - pos);
    Tensor logits = run_group(embed_group(batch, pos, count), pos, count);
    last_logits = ops::slice_seq(logits, count - 1, 1).reshaped({1, cfg_.vocab_size});
  }

  std::vector<int> out = prompt;
  const int want = kp + std::min(max_new, cfg_.max_seq - kp);
  while (static_cast<int>(out.size()) < want) {
    const int next = sample_from_logits(last_logits, temperature, rng);
    out.push_back(next);
    if (next == eos_id || static_cast<int>(out.size()) >= want) break;
    const int pos = static_cast<int>(out.size()) - 1;
    std::vector<int> pos_ids = {pos};
    Tensor te = ops::embedding(tok_emb_, {next});
    Tensor pe = ops::embedding(pos_emb_, pos_ids);
    Tensor x = ops::add(te, pe).reshaped({1, 1, cfg_.d_hidden});
    last_logits = run_group(x, pos, 1).reshaped({1, cfg_.vocab_size});
  }
  return out;
}

std::vector<int> Model::generate_soft(const std::vector<int>& prompt, int max_new,
                                      float temperature, float lambda, Rng& rng,
                                      int eos_id) const {
  if (prompt.empty()) throw ParamError("generate: prompt must be nonempty");
  if (lambda < 0.0f || lambda > 1.0f) throw ParamError("generate: lambda must lie in [0,1]");
  if (static_cast<int>(prompt.size()) > cfg_.max_seq)
    throw ParamError("generate: prompt length exceeds max_seq");

  KvCache kv(cfg_.n_layers);
  Tensor prev_probs;
  Tensor last_logits;
  std::vector<int> out = prompt;
  const int kp = static_cast<int>(prompt.size());
  const int want = kp + std::min(max_new, cfg_.max_seq - kp);

  int pos = 0;
  while (true) {
    // forward all tokens we have, one position at a time
    while (pos < static_cast<int>(out.size())) {
      const int tok = out[static_cast<std::size_t>(pos)];
      Tensor e = ops::embedding(tok_emb_, {tok});
      Tensor x2 = e;
      if (pos > 0 && lambda > 0.0f) {
        Tensor mix = ops::matmul(prev_probs, tok_emb_);
        x2 = ops::add(ops::scale(e, 1.0f - lambda), ops::scale(mix, lambda));
      }
      Tensor pe = ops::embedding(pos_emb_, {pos});
      Tensor x = ops::add(x2, pe).reshaped({1, 1, cfg_.d_hidden});
      for (int l = 0; l < cfg_.n_layers; ++l) x = layer_block(l, x, kv, pos);
      last_logits = head_logits(x).reshaped({1, cfg_.vocab_size});
      prev_probs = ops::softmax(last_logits, 1.0f);
      ++pos;
    }
    if (static_cast<int>(out.size()) >= want) break;
    const int next = sample_from_logits(last_logits, temperature, rng);
    out.push_back(next);
    if (next == eos_id || static_cast<int>(out.size()) >= want) break;
  }
  return out;
}

Tensor Model::prompt_logits(const std::vector<int>& tokens) const {
  return forward_grouped(tokens);
}

void Model::attach_lora(int rank, const std::vector<std::string>& targets) {
  if (rank < 1) throw ParamError("attach_lora: rank must be >= 1");
  if (lora_.rank > 0) throw StateError("attach_lora: adapters already attached");
  for (const std::string& t : targets)
    if (std::find(kLoraTargets.begin(), kLoraTargets.end(), t) == kLoraTargets.end())
      throw ParamError("attach_lora: unknown target '" + t + "'");

  Rng rng(0x10ad5eedULL);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    for (const std::string& t : targets) {
      int din = cfg_.d_hidden, dout = cfg_.d_hidden;
      if (t == "k" || t == "v" || t == "q") dout = cfg_.d_kv;
      if (t == "o") { din = cfg_.d_kv; dout = cfg_.d_hidden; }
      if (t == "gate" || t == "up") dout = cfg_.d_inter;
      if (t == "down") { din = cfg_.d_inter; dout = cfg_.d_hidden; }
      LoraAdapter ad;
      ad.a = Tensor::randn({din, rank}, rng, 0.02f, true);
      ad.b = Tensor::zeros({rank, dout}, true);
      adapters_["block" + std::to_string(l) + "." + t] = std::move(ad);
    }
  }
  lora_.rank = rank;
  lora_.targets = targets;

  // base weights freeze; connection projections stay trainable
  for (Tensor* t : {&tok_emb_, &pos_emb_, &final_norm_w_, &lm_head_}) t->requires_grad = false;
  for (Block& blk : blocks_)
    for (Tensor* t : {&blk.norm1_w, &blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.norm2_w,
                      &blk.w_gate, &blk.w_up, &blk.w_down})
      t->requires_grad = false;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb_);
  out.emplace_back("pos_emb", pos_emb_);
  out.emplace_back("final_norm.w", final_norm_w_);
  out.emplace_back("lm_head", lm_head_);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const Block& blk = blocks_[static_cast<std::size_t>(l)];
    const std::string p = "block" + std::to_string(l) + ".";
    out.emplace_back(p + "norm1.w", blk.norm1_w);
    out.emplace_back(p + "wq", blk.wq);
    out.emplace_back(p + "wk", blk.wk);
    out.emplace_back(p + "wv", blk.wv);
    out.emplace_back(p + "wo", blk.wo);
    out.emplace_back(p + "norm2.w", blk.norm2_w);
    out.emplace_back(p + "w_gate", blk.w_gate);
    out.emplace_back(p + "w_up", blk.w_up);
    out.emplace_back(p + "w_down", blk.w_down);
  }
  for (std::size_t ci = 0; ci < spec_.connections.size(); ++ci) {
    const Connection& c = spec_.connections[ci];
    const DownProjection& dp = down_projs_[ci];
    const std::string p =
        "conn." + std::to_string(c.src) + "->" + std::to_string(c.dst) + ".";
    out.emplace_back(p + "a", dp.a);
    out.emplace_back(p + "bias_a", dp.bias_a);
    out.emplace_back(p + "b", dp.b);
    out.emplace_back(p + "bias_b", dp.bias_b);
  }
  for (const auto& [name, ad] : adapters_) {
    out.emplace_back("lora." + name + ".a", ad.a);
    out.emplace_back("lora." + name + ".b", ad.b);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::trainable_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, t] : parameters())
    if (t.requires_grad) out.emplace_back(name, t);
  return out;
}

std::int64_t Model::trainable_param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : trainable_parameters()) n += static_cast<std::int64_t>(t.numel());
  return n;
}

}  // namespace turbo
