#include "turbo/tasks.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace turbo::tasks {

Vocab::Vocab() {
  chars_ =
    "0123456789"
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    " \n:.,?()+-*=";
  for (std::size_t i = 0; i < chars_.size(); ++i)
    to_id_[chars_[i]] = static_cast<int>(i) + 2;  // 0 = pad, 1 = eos
}

int Vocab::id_of(char c) const {
  const auto it = to_id_.find(c);
  if (it == to_id_.end())
    throw TokenError(std::string("unknown character '") + c + "' (code " +
                     std::to_string(static_cast<int>(static_cast<unsigned char>(c))) + ")");
  return it->second;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto it = to_id_.find(text[i]);
    if (it == to_id_.end())
      throw TokenError(std::string("unknown character '") + text[i] + "' at offset " +
                       std::to_string(i));
    ids.push_back(it->second);
  }
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == pad_id() || id == eos_id()) continue;
    if (id < 0 || id >= size())
      throw TokenError("token id " + std::to_string(id) + " out of range");
    out.push_back(chars_[static_cast<std::size_t>(id - 2)]);
  }
  return out;
}

std::vector<int> Vocab::digit_ids() const {
  std::vector<int> ids;
  for (char c = '0'; c <= '9'; ++c) ids.push_back(id_of(c));
  return ids;
}

Sample make_sample(const Vocab& vocab, const std::string& prompt, const std::string& completion) {
  Sample s;
  s.prompt = prompt;
  s.completion = completion;
  s.prompt_ids = vocab.encode(prompt);
  s.completion_ids = vocab.encode(completion);
  s.loss_mask.assign(s.prompt_ids.size() + s.completion_ids.size(), 0);
  for (std::size_t i = s.prompt_ids.size(); i < s.loss_mask.size(); ++i) s.loss_mask[i] = 1;
  return s;
}

std::vector<Sample> gen_parity(const Vocab& vocab, std::uint64_t seed, int n, int min_len,
                               int max_len) {
  if (min_len < 1 || min_len > max_len)
    throw ParamError("gen_parity: need 1 <= min_len <= max_len");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const int len = static_cast<int>(rng.uniform_int(min_len, max_len));
    std::string bits;
    int ones = 0;
    for (int j = 0; j < len; ++j) {
      const int b = rng.coin() ? 1 : 0;
      ones += b;
      if (j) bits.push_back(' ');
      bits.push_back(static_cast<char>('0' + b));
    }
    const std::string prompt =
        "Question: Output the parity of this sequence.\nInput: " + bits + "\nAnswer:";
    out.push_back(make_sample(vocab, prompt, (ones % 2) ? "1" : "0"));
  }
  return out;
}

namespace {

// expression node: rendered text plus its value in Z/10
struct ExprPiece {
  std::string text;
  int mod = 0;  // 0..9
  bool parenthesized = false;
};

int mod_op(char op, int a, int b) {
  switch (op) {
    case '+': return (a + b) % 10;
    case '-': return ((a - b) % 10 + 10) % 10;
    default: return (a * b) % 10;
  }
}

ExprPiece gen_expr(Rng& rng, int n_operands) {
  ExprPiece piece;
  if (n_operands == 1) {
    const int d = static_cast<int>(rng.uniform_int(0, 9));
    piece.text = std::string(1, static_cast<char>('0' + d));
    piece.mod = d;
  } else {
    const int arity = static_cast<int>(rng.uniform_int(2, std::min(n_operands, 4)));
    std::vector<int> split(static_cast<std::size_t>(arity), 1);
    int left = n_operands - arity;
    for (int j = 0; j < arity - 1 && left > 0; ++j) {
      const int extra = static_cast<int>(rng.uniform_int(0, left));
      split[static_cast<std::size_t>(j)] += extra;
      left -= extra;
    }
    split[static_cast<std::size_t>(arity) - 1] += left;
    const char op = "+-*"[rng.uniform_int(0, 2)];
    std::string text = "(";
    int value = 0;
    for (int j = 0; j < arity; ++j) {
      ExprPiece child = gen_expr(rng, split[static_cast<std::size_t>(j)]);
      if (j) {
        text += ' ';
        text += op;
        text += ' ';
        value = mod_op(op, value, child.mod);
      } else {
        value = child.mod;
      }
      text += child.text;
    }
    text += ')';
    piece.text = std::move(text);
    piece.mod = value;
    piece.parenthesized = true;
  }
  if (rng.coin(0.25)) {
    if (!piece.parenthesized) piece.text = "(" + piece.text + ")";
    piece.text = "-" + piece.text;
    piece.mod = (10 - piece.mod) % 10;
    piece.parenthesized = false;  // "-(...)" needs wrapping before another negation
  }
  return piece;
}

}  // namespace

std::vector<Sample> gen_arith(const Vocab& vocab, std::uint64_t seed, int n, int min_ops,
                              int max_ops) {
  if (min_ops < 1 || min_ops > max_ops)
    throw ParamError("gen_arith: need 1 <= min_ops <= max_ops");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed ^ 0xa417ULL, static_cast<std::uint64_t>(i)));
    const int ops = static_cast<int>(rng.uniform_int(min_ops, max_ops));
    ExprPiece e = gen_expr(rng, ops);
    if (!e.parenthesized && e.text[0] != '-') e.text = "(" + e.text + ")";
    const std::string prompt =
        "Question: Evaluate this expression modulo 10.\nInput: " + e.text + " =\nAnswer:";
    out.push_back(make_sample(vocab, prompt, std::string(1, static_cast<char>('0' + e.mod))));
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open dataset for writing: " + path);
  for (const Sample& s : samples) {
    nlohmann::json j;
    j["prompt"] = s.prompt;
    j["completion"] = s.completion;
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("dataset write failed: " + path);
}

std::vector<Sample> read_jsonl(const std::string& path, const Vocab& vocab) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset: " + path);
  std::vector<Sample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    if (!j.contains("prompt") || !j.contains("completion"))
      throw IoError(path + ":" + std::to_string(lineno) + ": record missing prompt/completion");
    out.push_back(make_sample(vocab, j["prompt"].get<std::string>(),
                              j["completion"].get<std::string>()));
  }
  return out;
}

}  // namespace turbo::tasks
