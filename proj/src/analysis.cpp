#include "turbo/analysis.hpp"

#include <algorithm>
#include <sstream>

namespace turbo::analysis {

DepGraph DepGraph::build(int n_layers, int seq_len, const ConnectionSpec& spec) {
  if (n_layers < 1 || seq_len < 1)
    throw ParamError("DepGraph: n_layers and seq_len must be >= 1");
  spec.validate(n_layers);

  DepGraph g;
  g.n_layers = n_layers;
  g.seq_len = seq_len;
  g.adj.resize(static_cast<std::size_t>(g.node_count()));

  for (int i = 0; i < seq_len; ++i) {
    for (int lvl = 1; lvl <= n_layers; ++lvl) {
      // block lvl-1 applied to token i reads token i and all earlier tokens
      // at the previous level
      for (int j = 0; j <= i; ++j)
        g.adj[static_cast<std::size_t>(g.node_id(j, lvl - 1))].push_back(g.node_id(i, lvl));
    }
  }
  const int gs = spec.group_size;
  for (const Connection& c : spec.connections) {
    for (int i = gs; i < seq_len; ++i)
      g.adj[static_cast<std::size_t>(g.node_id(i - gs, c.src + 1))].push_back(
          g.node_id(i, c.dst + 1));
  }
  return g;
}

std::vector<int> DepGraph::topo_order() const {
  const int n = node_count();
  std::vector<int> indeg(static_cast<std::size_t>(n), 0);
  for (const auto& out : adj)
    for (int v : out) ++indeg[static_cast<std::size_t>(v)];

  std::vector<int> queue;
  queue.reserve(static_cast<std::size_t>(n));
  for (int v = 0; v < n; ++v)
    if (indeg[static_cast<std::size_t>(v)] == 0) queue.push_back(v);

  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(n));
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const int u = queue[head];
    order.push_back(u);
    for (int v : adj[static_cast<std::size_t>(u)])
      if (--indeg[static_cast<std::size_t>(v)] == 0) queue.push_back(v);
  }
  if (static_cast<int>(order.size()) != n)
    throw StructuralError("DepGraph: cycle detected; connection spec is ill-formed");
  return order;
}

int DepGraph::longest_path() const {
  const std::vector<int> order = topo_order();
  std::vector<int> dp(static_cast<std::size_t>(node_count()), 0);
  int best = 0;
  for (int u : order) {
    for (int v : adj[static_cast<std::size_t>(u)]) {
      dp[static_cast<std::size_t>(v)] =
          std::max(dp[static_cast<std::size_t>(v)], dp[static_cast<std::size_t>(u)] + 1);
      best = std::max(best, dp[static_cast<std::size_t>(v)]);
    }
  }
  return best;
}

int max_depth(int n_layers, int seq_len, const ConnectionSpec& spec) {
  return DepGraph::build(n_layers, seq_len, spec).longest_path();
}

int sequential_steps(int k, int g) {
  if (k < 1 || g < 1) throw ParamError("sequential_steps: k and g must be >= 1");
  return (k + g - 1) / g;
}

ParamCounts count_params(int d_hidden, int d_kv, int d_inter, int n_layers, int rank,
                         int n_connections, int proj_rank) {
  if (d_hidden < 1 || d_kv < 1 || d_inter < 1 || n_layers < 1 || rank < 1 || proj_rank < 1 ||
      n_connections < 0)
    throw ParamError("count_params: dimensions and ranks must be >= 1");
  const auto d = static_cast<std::int64_t>(d_hidden);
  const auto kv = static_cast<std::int64_t>(d_kv);
  const auto di = static_cast<std::int64_t>(d_inter);
  const auto r = static_cast<std::int64_t>(rank);
  const auto rd = static_cast<std::int64_t>(proj_rank);

  ParamCounts out;
  out.per_block = 4 * r * d + 2 * r * (d + kv) + 3 * r * (d + di);
  out.per_connection = 2 * rd * d + rd + d;
  out.baseline_total = n_layers * out.per_block;
  out.turboconn_total = out.baseline_total + n_connections * out.per_connection;
  return out;
}

std::string depth_report_text(const std::vector<DepthRow>& rows) {
  std::ostringstream os;
  os << "    L     k     g  n_conn  max_depth  sequential_steps\n";
  for (const DepthRow& r : rows) {
    os.width(5);
    os << r.n_layers;
    os.width(6);
    os << r.seq_len;
    os.width(6);
    os << r.group_size;
    os.width(8);
    os << r.n_connections;
    os.width(11);
    os << r.max_depth;
    os.width(18);
    os << r.sequential_steps;
    os << '\n';
  }
  return os.str();
}

std::string depth_report_csv(const std::vector<DepthRow>& rows) {
  std::ostringstream os;
  os << "L,k,g,n_conn,max_depth,sequential_steps\n";
  for (const DepthRow& r : rows)
    os << r.n_layers << ',' << r.seq_len << ',' << r.group_size << ',' << r.n_connections << ','
       << r.max_depth << ',' << r.sequential_steps << '\n';
  return os.str();
}

}  // namespace turbo::analysis
