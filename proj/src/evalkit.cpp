#include "turbo/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace turbo::evalkit {

std::string trim_whitespace(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

Completer model_completer(const Model& model, const tasks::Vocab& vocab, float temperature,
                          std::uint64_t seed, int max_new, const std::string& method,
                          float soft_lambda) {
  const bool soft = method == "softtoken";
  return [&model, &vocab, temperature, seed, max_new, soft,
          soft_lambda](const tasks::Sample& sample, std::size_t index) -> std::string {
    Rng rng(mix_seed(seed, index));
    std::vector<int> out;
    if (soft)
      out = model.generate_soft(sample.prompt_ids, max_new, temperature, soft_lambda, rng,
                                vocab.eos_id());
    else
      out = model.generate(sample.prompt_ids, max_new, temperature, rng, vocab.eos_id());
    const std::vector<int> completion(out.begin() + static_cast<std::ptrdiff_t>(
                                                        sample.prompt_ids.size()),
                                      out.end());
    return vocab.decode(completion);
  };
}

double accuracy(const Completer& completer, const std::vector<tasks::Sample>& samples) {
  if (samples.empty()) throw ParamError("accuracy: no samples");
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(samples.size());
  std::vector<std::uint8_t> correct(samples.size(), 0);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const tasks::Sample& s = samples[static_cast<std::size_t>(i)];
    const std::string got = completer(s, static_cast<std::size_t>(i));
    correct[static_cast<std::size_t>(i)] =
        trim_whitespace(got) == trim_whitespace(s.completion) ? 1 : 0;
  }
  std::size_t hits = 0;
  for (std::uint8_t c : correct) hits += c;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double accuracy(const Model& model, const tasks::Vocab& vocab,
                const std::vector<tasks::Sample>& samples, float temperature, std::uint64_t seed,
                const std::string& method, float soft_lambda) {
  // answers are short; a handful of tokens is enough for answer + eos
  const int max_new = 4;
  return accuracy(model_completer(model, vocab, temperature, seed, max_new, method, soft_lambda),
                  samples);
}

int count_eliminated(std::span<const double> digit_probs, double tau) {
  int n = 0;
  for (double p : digit_probs)
    if (p < tau) ++n;
  return n;
}

std::vector<double> digit_probs(const Model& model, const tasks::Vocab& vocab,
                                const tasks::Sample& sample) {
  const std::vector<int> ids = vocab.digit_ids();
  if (ids.size() != 10) throw ParamError("digit_probs: vocabulary lacks digit tokens");
  const Tensor logits = model.prompt_logits(sample.prompt_ids);
  const int v = logits.dim(1);
  const float* last = logits.ptr() + static_cast<std::size_t>(logits.dim(0) - 1) * v;

  double mx = -1e300;
  for (int id : ids) mx = std::max(mx, static_cast<double>(last[id]));
  std::vector<double> probs(10);
  double sum = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    probs[i] = std::exp(static_cast<double>(last[ids[i]]) - mx);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

double eliminated_choices(const Model& model, const tasks::Vocab& vocab,
                          const std::vector<tasks::Sample>& samples, double tau) {
  if (samples.empty()) throw ParamError("eliminated_choices: no samples");
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(samples.size());
  std::vector<int> counts(samples.size(), 0);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto probs = digit_probs(model, vocab, samples[static_cast<std::size_t>(i)]);
    counts[static_cast<std::size_t>(i)] = count_eliminated(probs, tau);
  }
  double total = 0.0;
  for (int c : counts) total += c;
  return total / static_cast<double>(samples.size());
}

std::vector<MetricsRow> length_sweep(const Model& model, const tasks::Vocab& vocab,
                                     const std::string& task, const std::vector<int>& lens,
                                     int n_per_len, std::uint64_t seed, float temperature,
                                     const std::string& method, float soft_lambda) {
  if (!std::is_sorted(lens.begin(), lens.end()))
    throw ParamError("length_sweep: eval lengths must be sorted ascending");
  if (task != "parity" && task != "arith")
    throw ParamError("length_sweep: unknown task '" + task + "'");
  std::vector<MetricsRow> rows;
  for (int len : lens) {
    std::vector<tasks::Sample> samples =
        task == "parity"
            ? tasks::gen_parity(vocab, mix_seed(seed, static_cast<std::uint64_t>(len)), n_per_len,
                                len, len)
            : tasks::gen_arith(vocab, mix_seed(seed, static_cast<std::uint64_t>(len)), n_per_len,
                               len, len);
    MetricsRow row;
    row.task = task;
    row.split = "sweep";
    row.method = method;
    row.group_size = model.spec().group_size;
    row.alpha = model.spec().alpha;
    row.length = len;
    row.n = n_per_len;
    row.accuracy = accuracy(model, vocab, samples, temperature, seed, method, soft_lambda);
    row.eliminated_mean = eliminated_choices(model, vocab, samples);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {
std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
std::string fmt_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}
}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open metrics csv for writing: " + path);
  os << "task,split,method,g,alpha,length,n,accuracy,eliminated_mean\n";
  for (const MetricsRow& r : rows) {
    os << r.task << ',' << r.split << ',' << r.method << ',' << r.group_size << ','
       << fmt_float(r.alpha) << ',' << r.length << ',' << r.n << ',' << fmt_double(r.accuracy)
       << ',' << fmt_double(r.eliminated_mean) << '\n';
  }
  if (!os) throw IoError("metrics csv write failed: " + path);
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open metrics csv: " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError(path + ": missing header");
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 9)
      throw IoError(path + ":" + std::to_string(lineno) + ": expected 9 fields");
    MetricsRow r;
    r.task = fields[0];
    r.split = fields[1];
    r.method = fields[2];
    r.group_size = std::stoi(fields[3]);
    r.alpha = std::stof(fields[4]);
    r.length = std::stoi(fields[5]);
    r.n = std::stoi(fields[6]);
    r.accuracy = std::stod(fields[7]);
    r.eliminated_mean = std::stod(fields[8]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace turbo::evalkit
