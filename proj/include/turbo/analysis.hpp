#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "turbo/model.hpp"

namespace turbo::analysis {

// Dependency graph over (token, level) nodes. Level 0 is the embedding and
// level l+1 the output of block l. Edges: within-token block application,
// causal attention (any earlier token, one level up), and downward
// connections ((i-g, src+1) -> (i, dst+1) for i >= g). Depth is the longest
// path counted in edges, i.e. block applications: a plain stack has depth L.
struct DepGraph {
  int n_layers = 0;
  int seq_len = 0;
  std::vector<std::vector<int>> adj;  // out-edges, node id = token * (L+1) + level

  static DepGraph build(int n_layers, int seq_len, const ConnectionSpec& spec);

  int node_count() const { return seq_len * (n_layers + 1); }
  int node_id(int token, int level) const { return token * (n_layers + 1) + level; }

  // Kahn's algorithm; throws StructuralError if the graph has a cycle.
  std::vector<int> topo_order() const;

  // longest path in edge count via DP over the topological order
  int longest_path() const;
};

int max_depth(int n_layers, int seq_len, const ConnectionSpec& spec);

// ceil(k / g)
int sequential_steps(int k, int g);

struct ParamCounts {
  std::int64_t per_block = 0;        // trainable adapter parameters per block
  std::int64_t per_connection = 0;   // parameters per downward connection
  std::int64_t baseline_total = 0;   // n_layers * per_block
  std::int64_t turboconn_total = 0;  // baseline_total + n_conn * per_connection
};

ParamCounts count_params(int d_hidden, int d_kv, int d_inter, int n_layers, int rank,
                         int n_connections, int proj_rank);

struct DepthRow {
  int n_layers, seq_len, group_size, n_connections, max_depth, sequential_steps;
};

std::string depth_report_text(const std::vector<DepthRow>& rows);
std::string depth_report_csv(const std::vector<DepthRow>& rows);

}  // namespace turbo::analysis
