#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "turbo/ops.hpp"
#include "turbo/rng.hpp"
#include "turbo/tensor.hpp"

namespace turbo {

struct ModelConfig {
  int n_layers = 2;
  int d_hidden = 32;
  int n_heads = 2;
  int d_kv = 32;     // total key/value width
  int d_inter = 64;  // MLP intermediate width
  int vocab_size = 16;
  int max_seq = 64;

  void validate() const;
};

// One downward connection: hidden state of block `src` at token i-g is
// projected and added to the output of block `dst` at token i. Block indices
// are 0-based, dst < src.
struct Connection {
  int src = 0;
  int dst = 0;
  auto operator<=>(const Connection&) const = default;
};

struct ConnectionSpec {
  std::vector<Connection> connections;
  float alpha = 1.0f;
  int group_size = 1;
  int proj_rank = 16;  // rank of each connection's projection

  void validate(int n_layers) const;

  // named presets shipping the published connection tables
  static ConnectionSpec preset(const std::string& name, float alpha, int group_size,
                               int proj_rank);
  static std::vector<Connection> parse_table(const std::string& text);
  static std::vector<Connection> load_table_file(const std::string& path);
};

// Low-rank projection with biases. b, bias_a, bias_b start at zero so the
// projection is exactly the zero map at initialization.
struct DownProjection {
  Tensor a;       // [d_hidden, rank]
  Tensor bias_a;  // [rank]
  Tensor b;       // [rank, d_hidden]
  Tensor bias_b;  // [d_hidden]
};

struct LoraAdapter {
  Tensor a;  // [d_in, rank], random init
  Tensor b;  // [rank, d_out], zero init
};

inline const std::vector<std::string> kLoraTargets = {"q", "k", "v", "o", "gate", "up", "down"};

struct LoraConfig {
  int rank = 0;
  std::vector<std::string> targets;  // subset of kLoraTargets
};

// Per-layer key/value chunks, one entry appended per processed group.
class KvCache {
 public:
  explicit KvCache(int n_layers) : keys_(n_layers), values_(n_layers) {}

  void append(int layer, const Tensor& k, const Tensor& v);
  int length(int layer) const;  // total cached tokens for a layer
  const std::vector<Tensor>& keys(int layer) const { return keys_.at(layer); }
  const std::vector<Tensor>& values(int layer) const { return values_.at(layer); }

 private:
  std::vector<std::vector<Tensor>> keys_, values_;
};

// Buffer of recent hidden states for connection source layers. Holds just
// enough history to serve h_src at position i-g while computing position i.
class DownCache {
 public:
  void push(int source_layer, int start_pos, const Tensor& h);
  // gathers [b, count, d] covering absolute positions [start, start+count)
  Tensor fetch(int source_layer, int start, int count) const;
  // drops chunks that end at or before `pos`
  void prune_before(int pos);

 private:
  struct Chunk {
    int start;
    Tensor h;
  };
  std::map<int, std::deque<Chunk>> chunks_;
};

struct Block {
  Tensor norm1_w, wq, wk, wv, wo;
  Tensor norm2_w, w_gate, w_up, w_down;
};

struct ForwardStats {
  int group_iterations = 0;
};

// Decoder transformer with optional downward cross-token connections.
// Read-only during forward/generate; training mutates parameters through
// their grad slots and requires exclusive access.
class Model {
 public:
  Model(const ModelConfig& cfg, const ConnectionSpec& spec, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const ConnectionSpec& spec() const { return spec_; }
  ConnectionSpec& mutable_spec() { return spec_; }

  // One pre-norm decoder block over a group of positions; reads and appends
  // to the KV cache. pos_offset is the absolute position of x[:,0,:].
  Tensor layer_block(int layer, const Tensor& x, KvCache& kv, int pos_offset) const;

  // Grouped forward over a rectangular batch of token ids: ceil(k/g) group
  // iterations, downward connection terms applied at positions >= g.
  Tensor forward_batch(const std::vector<std::vector<int>>& tokens, int group_size,
                       ForwardStats* stats = nullptr) const;

  // single-sequence convenience: [k, vocab] logits, group size from the spec
  Tensor forward_grouped(const std::vector<int>& tokens, ForwardStats* stats = nullptr) const;

  // Sequential forward where the first-layer input of position i blends the
  // previous position's output distribution through the embedding matrix.
  Tensor forward_soft_batch(const std::vector<std::vector<int>>& tokens, float lambda) const;
  Tensor forward_soft_token(const std::vector<int>& tokens, float lambda) const;

  // the soft-token convex blend for one position (before positional term)
  Tensor soft_blend(int token_id, const Tensor& prev_probs, float lambda) const;

  std::vector<int> generate(const std::vector<int>& prompt, int max_new, float temperature,
                            Rng& rng, int eos_id = -1) const;
  std::vector<int> generate_soft(const std::vector<int>& prompt, int max_new, float temperature,
                                 float lambda, Rng& rng, int eos_id = -1) const;

  // logits for every position of a single sequence at temperature 1 — used by
  // evaluation to inspect the next-token distribution without sampling
  Tensor prompt_logits(const std::vector<int>& tokens) const;

  void attach_lora(int rank, const std::vector<std::string>& targets);
  bool has_lora() const { return lora_.rank > 0; }
  const LoraConfig& lora_config() const { return lora_; }

  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::vector<std::pair<std::string, Tensor>> trainable_parameters() const;
  std::int64_t trainable_param_count() const;

  // direct access for tests and the serial reference implementation
  const Tensor& tok_emb() const { return tok_emb_; }
  const Tensor& pos_emb() const { return pos_emb_; }
  const Tensor& final_norm_w() const { return final_norm_w_; }
  const Tensor& lm_head() const { return lm_head_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const std::vector<DownProjection>& down_projs() const { return down_projs_; }
  const LoraAdapter* adapter(int layer, const std::string& target) const;

  static constexpr float kRmsEps = 1e-5f;

 private:
  Tensor linear(const Tensor& x2d, const Tensor& w, int layer, const char* target) const;
  Tensor embed_group(const std::vector<std::vector<int>>& tokens, int pos, int count) const;
  Tensor head_logits(const Tensor& x) const;  // final norm + lm_head on [b,t,d]
  Tensor apply_connections(const Tensor& y, int dst_layer, const DownCache& dcache, int pos,
                           int count) const;

  ModelConfig cfg_;
  ConnectionSpec spec_;
  Tensor tok_emb_, pos_emb_, final_norm_w_, lm_head_;
  std::vector<Block> blocks_;
  std::vector<DownProjection> down_projs_;           // parallel to spec_.connections
  std::map<int, std::vector<int>> conns_by_dest_;    // dst layer -> connection indices
  std::set<int> source_layers_;
  LoraConfig lora_;
  std::map<std::string, LoraAdapter> adapters_;  // "block<l>.<target>"
};

}  // namespace turbo
