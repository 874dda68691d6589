#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "turbo/errors.hpp"
#include "turbo/rng.hpp"

namespace turbo::tasks {

// Fixed character-level vocabulary covering the generators' alphabet plus
// reserved pad and end-of-sequence ids.
class Vocab {
 public:
  Vocab();

  int pad_id() const { return 0; }
  int eos_id() const { return 1; }
  int size() const { return static_cast<int>(chars_.size()) + 2; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;  // pad/eos are skipped
  int id_of(char c) const;

  std::vector<int> digit_ids() const;  // ids of '0'..'9', in digit order

 private:
  std::string chars_;
  std::unordered_map<char, int> to_id_;
};

struct Sample {
  std::string prompt;
  std::string completion;
  std::vector<int> prompt_ids;
  std::vector<int> completion_ids;
  std::vector<std::uint8_t> loss_mask;  // over prompt+completion ids; true on completion
};

Sample make_sample(const Vocab& vocab, const std::string& prompt, const std::string& completion);

// Parity: uniform length in [min_len, max_len], i.i.d. fair bits; completion
// is "1" iff the count of ones is odd. Pure in (seed, index).
std::vector<Sample> gen_parity(const Vocab& vocab, std::uint64_t seed, int n, int min_len = 1,
                               int max_len = 70);

// Multi-step arithmetic over digits with {+,-,*}, unary negation and
// parentheses; the completion is the value reduced modulo 10 into 0..9.
std::vector<Sample> gen_arith(const Vocab& vocab, std::uint64_t seed, int n, int min_ops = 1,
                              int max_ops = 30);

// one JSON object {"prompt": ..., "completion": ...} per line
void write_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_jsonl(const std::string& path, const Vocab& vocab);

}  // namespace turbo::tasks
