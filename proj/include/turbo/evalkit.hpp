#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "turbo/model.hpp"
#include "turbo/tasks.hpp"

namespace turbo::evalkit {

struct MetricsRow {
  std::string task;
  std::string split;
  std::string method;
  int group_size = 1;
  float alpha = 0.0f;
  int length = 0;  // length bucket
  int n = 0;
  double accuracy = 0.0;
  double eliminated_mean = 0.0;
};

// produces the generated completion text for one sample; must be callable
// from multiple threads (index feeds the per-sample rng)
using Completer = std::function<std::string(const tasks::Sample&, std::size_t index)>;

Completer model_completer(const Model& model, const tasks::Vocab& vocab, float temperature,
                          std::uint64_t seed, int max_new, const std::string& method = "baseline",
                          float soft_lambda = 0.0f);

// exact string match after whitespace trim; samples evaluated in parallel,
// aggregated in sample-index order
double accuracy(const Completer& completer, const std::vector<tasks::Sample>& samples);
double accuracy(const Model& model, const tasks::Vocab& vocab,
                const std::vector<tasks::Sample>& samples, float temperature,
                std::uint64_t seed = 1, const std::string& method = "baseline",
                float soft_lambda = 0.0f);

// digits whose probability falls below tau, over an already-renormalized
// digit distribution
int count_eliminated(std::span<const double> digit_probs, double tau);

// next-token distribution at the first completion position, renormalized over
// the ten digit tokens
std::vector<double> digit_probs(const Model& model, const tasks::Vocab& vocab,
                                const tasks::Sample& sample);

double eliminated_choices(const Model& model, const tasks::Vocab& vocab,
                          const std::vector<tasks::Sample>& samples, double tau = 0.001);

// fresh eval sets per length; one row per length
std::vector<MetricsRow> length_sweep(const Model& model, const tasks::Vocab& vocab,
                                     const std::string& task, const std::vector<int>& lens,
                                     int n_per_len, std::uint64_t seed, float temperature,
                                     const std::string& method = "baseline",
                                     float soft_lambda = 0.0f);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

std::string trim_whitespace(const std::string& s);

}  // namespace turbo::evalkit
