#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "turbo/model.hpp"

// Serial double-precision reference forward pass. Independent of the grouped
// KV-cached implementation: it walks the sequence one token at a time,
// recomputes attention from stored hidden states, and applies the downward
// connection rule h_l(i) += alpha * D(h_src(i-g)) directly. Used by tests as
// the agreement oracle and as the clean function for finite-difference
// gradient checks (weights live in doubles, so probes are not quantized).
namespace turbo::ref {

struct Weights {
  ModelConfig cfg;
  std::vector<Connection> connections;
  float alpha = 1.0f;
  int group_size = 1;
  std::map<std::string, std::vector<double>> params;  // keyed by Model parameter names

  static Weights from_model(const Model& m);
  bool has(const std::string& name) const { return params.count(name) > 0; }
};

// logits[i][v] for every position of a single sequence
std::vector<std::vector<double>> forward_logits(const Weights& w, const std::vector<int>& tokens);

// mean negative log-likelihood over unmasked positions
double loss(const Weights& w, const std::vector<int>& tokens, const std::vector<int>& targets,
            const std::vector<std::uint8_t>& mask);

}  // namespace turbo::ref
