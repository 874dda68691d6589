#include "turbo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "turbo/evalkit.hpp"
#include "turbo/kernels.hpp"

namespace turbo::trainer {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ParamError("TrainConfig: batch_size must be >= 1");
  if (epochs < 1) throw ParamError("TrainConfig: epochs must be >= 1");
  if (warmup < 1 || warmup >= period)
    throw ParamError("TrainConfig: need 1 <= warmup < period");
  if (!(lr_max >= 0.0f)) throw ParamError("TrainConfig: lr_max must be >= 0");
  if (group_size < 1) throw ParamError("TrainConfig: group_size must be >= 1");
  if (method != "baseline" && method != "turboconn" && method != "softtoken")
    throw ParamError("TrainConfig: unknown method '" + method + "'");
  if (soft_lambda < 0.0f || soft_lambda > 1.0f)
    throw ParamError("TrainConfig: soft_lambda must lie in [0,1]");
  model.validate();
}

namespace {

std::int64_t to_i64(const std::string& v, const std::string& key) {
  try {
    return std::stoll(v);
  } catch (...) {
    throw ParamError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

double to_f64(const std::string& v, const std::string& key) {
  try {
    return std::stod(v);
  } catch (...) {
    throw ParamError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

}  // namespace

TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open train config: " + path);
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw ParamError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
      continue;
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ParamError(path + ":" + std::to_string(lineno) + ": empty key or value");

    if (key == "batch_size") cfg.batch_size = static_cast<int>(to_i64(val, key));
    else if (key == "epochs") cfg.epochs = static_cast<int>(to_i64(val, key));
    else if (key == "lr_max") cfg.lr_max = static_cast<float>(to_f64(val, key));
    else if (key == "period") cfg.period = static_cast<int>(to_i64(val, key));
    else if (key == "warmup") cfg.warmup = static_cast<int>(to_i64(val, key));
    else if (key == "alpha") cfg.alpha = static_cast<float>(to_f64(val, key));
    else if (key == "group") cfg.group_size = static_cast<int>(to_i64(val, key));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_i64(val, key));
    else if (key == "beta1") cfg.beta1 = static_cast<float>(to_f64(val, key));
    else if (key == "beta2") cfg.beta2 = static_cast<float>(to_f64(val, key));
    else if (key == "adam_eps") cfg.adam_eps = static_cast<float>(to_f64(val, key));
    else if (key == "weight_decay") cfg.weight_decay = static_cast<float>(to_f64(val, key));
    else if (key == "clip_norm") cfg.clip_norm = static_cast<float>(to_f64(val, key));
    else if (key == "method") cfg.method = val;
    else if (key == "soft_lambda") cfg.soft_lambda = static_cast<float>(to_f64(val, key));
    else if (key == "log_every") cfg.log_every = static_cast<int>(to_i64(val, key));
    else if (key == "checkpoint_every") cfg.checkpoint_every = static_cast<int>(to_i64(val, key));
    else if (key == "val_max") cfg.val_max = static_cast<int>(to_i64(val, key));
    else if (key == "val_temperature") cfg.val_temperature = static_cast<float>(to_f64(val, key));
    else if (key == "proj_rank") cfg.proj_rank = static_cast<int>(to_i64(val, key));
    else if (key == "n_layers") cfg.model.n_layers = static_cast<int>(to_i64(val, key));
    else if (key == "d_hidden") cfg.model.d_hidden = static_cast<int>(to_i64(val, key));
    else if (key == "n_heads") cfg.model.n_heads = static_cast<int>(to_i64(val, key));
    else if (key == "d_kv") cfg.model.d_kv = static_cast<int>(to_i64(val, key));
    else if (key == "d_inter") cfg.model.d_inter = static_cast<int>(to_i64(val, key));
    else if (key == "vocab_size") cfg.model.vocab_size = static_cast<int>(to_i64(val, key));
    else if (key == "max_seq") cfg.model.max_seq = static_cast<int>(to_i64(val, key));
    else throw ParamError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return cfg;
}

float lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ParamError("lr_at: step must be >= 0");
  const std::int64_t p = step % cfg.period;
  if (p <= cfg.warmup)
    return static_cast<float>(static_cast<double>(cfg.lr_max) * static_cast<double>(p) /
                              static_cast<double>(cfg.warmup));
  const double frac = static_cast<double>(p - cfg.warmup) /
                      static_cast<double>(cfg.period - cfg.warmup);
  return static_cast<float>(static_cast<double>(cfg.lr_max) * 0.5 *
                            (1.0 + std::cos(3.14159265358979323846 * frac)));
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, float beta1, float beta2,
             float eps, float weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (auto& [name, t] : params) {
    if (!t.requires_grad) continue;
    t.ensure_grad();
    Slot s;
    s.name = name;
    s.param = t;
    s.m = Tensor::zeros(t.shape);
    s.v = Tensor::zeros(t.shape);
    slots_.push_back(std::move(s));
  }
}

void AdamW::zero_grad() {
  for (Slot& s : slots_) s.param.zero_grad();
}

double AdamW::clip_global_norm(double max_norm) {
  double ss = 0.0;
  for (const Slot& s : slots_) {
    const float* g = s.param.grad_ptr();
    const std::size_t n = s.param.numel();
    for (std::size_t i = 0; i < n; ++i) ss += static_cast<double>(g[i]) * g[i];
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const float sc = static_cast<float>(max_norm / norm);
    for (Slot& s : slots_) {
      float* g = s.param.grad_ptr();
      const std::size_t n = s.param.numel();
      for (std::size_t i = 0; i < n; ++i) g[i] *= sc;
    }
  }
  return norm;
}

double AdamW::max_abs_grad() const {
  double mx = 0.0;
  for (const Slot& s : slots_) {
    const float* g = s.param.grad_ptr();
    const std::size_t n = s.param.numel();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, std::abs(static_cast<double>(g[i])));
  }
  return mx;
}

void AdamW::step(float lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
  for (Slot& s : slots_) {
    float* p = s.param.ptr();
    const float* g = s.param.grad_ptr();
    float* m = s.m.ptr();
    float* v = s.v.ptr();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(s.param.numel());
#pragma omp parallel for schedule(static) if (n > 16384)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
      const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double pi = static_cast<double>(p[i]);
      pi -= static_cast<double>(lr) * (mhat / (std::sqrt(vhat) + eps_));
      pi -= static_cast<double>(lr) * weight_decay_ * static_cast<double>(p[i]);
      p[i] = static_cast<float>(pi);
    }
    if (kernels::has_nonfinite(p, s.param.numel()))
      throw NumericError("AdamW: parameter '" + s.name + "' became non-finite");
  }
}

std::map<std::string, Tensor> AdamW::state() const {
  std::map<std::string, Tensor> out;
  for (const Slot& s : slots_) {
    out.emplace("opt.m." + s.name, s.m);
    out.emplace("opt.v." + s.name, s.v);
  }
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state) {
  for (Slot& s : slots_) {
    const auto mi = state.find("opt.m." + s.name);
    const auto vi = state.find("opt.v." + s.name);
    if (mi == state.end() || vi == state.end())
      throw IoError("optimizer state missing for parameter '" + s.name + "'");
    if (mi->second.shape != s.m.shape || vi->second.shape != s.v.shape)
      throw IoError("optimizer state shape mismatch for parameter '" + s.name + "'");
    *s.m.data = *mi->second.data;
    *s.v.data = *vi->second.data;
  }
}

Batch assemble_batch(const std::vector<const tasks::Sample*>& samples,
                     const tasks::Vocab& vocab) {
  if (samples.empty()) throw ParamError("assemble_batch: empty batch");
  int maxlen = 0;
  for (const tasks::Sample* s : samples)
    maxlen = std::max(maxlen,
                      static_cast<int>(s->prompt_ids.size() + s->completion_ids.size()) + 1);
  Batch b;
  const int bs = static_cast<int>(samples.size());
  b.tokens.assign(static_cast<std::size_t>(bs),
                  std::vector<int>(static_cast<std::size_t>(maxlen), vocab.pad_id()));
  b.targets.assign(static_cast<std::size_t>(bs) * maxlen, 0);
  b.mask.assign(static_cast<std::size_t>(bs) * maxlen, 0);
  for (int i = 0; i < bs; ++i) {
    const tasks::Sample& s = *samples[static_cast<std::size_t>(i)];
    std::vector<int> seq = s.prompt_ids;
    seq.insert(seq.end(), s.completion_ids.begin(), s.completion_ids.end());
    seq.push_back(vocab.eos_id());
    std::copy(seq.begin(), seq.end(), b.tokens[static_cast<std::size_t>(i)].begin());
    const std::size_t base = static_cast<std::size_t>(i) * maxlen;
    for (std::size_t pos = 0; pos + 1 < seq.size(); ++pos) {
      b.targets[base + pos] = seq[pos + 1];
      // supervise positions predicting the completion and the eos
      if (pos + 1 >= s.prompt_ids.size()) b.mask[base + pos] = 1;
    }
  }
  return b;
}

double train_step(const Model& model, const Batch& batch, AdamW& opt, float lr,
                  const TrainConfig& cfg) {
  opt.zero_grad();
  Tape tape;
  float loss_value = 0.0f;
  {
    TapeScope scope(tape);
    Tensor logits = cfg.method == "softtoken"
                        ? model.forward_soft_batch(batch.tokens, cfg.soft_lambda)
                        : model.forward_batch(batch.tokens, cfg.group_size);
    const int bk = logits.dim(0) * logits.dim(1);
    Tensor flat = logits.reshaped({bk, logits.dim(2)});
    Tensor loss = ops::cross_entropy(flat, batch.targets, batch.mask);
    loss_value = loss.scalar();
    loss.grad_ptr()[0] = 1.0f;
    tape.backward();
  }
  opt.clip_global_norm(cfg.clip_norm);
  opt.step(lr);
  return static_cast<double>(loss_value);
}

namespace {

std::string method_of(const TrainConfig& cfg) { return cfg.method; }

void write_metrics_header(std::ofstream& os) { os << "step,epoch,loss,lr,val_acc\n"; }

}  // namespace

RunResult run(const TrainConfig& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume_checkpoint) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path train_path = fs::path(data_dir) / "train.jsonl";
  const fs::path val_path = fs::path(data_dir) / "val.jsonl";
  if (!fs::exists(train_path)) throw IoError("missing dataset file: " + train_path.string());
  if (!fs::exists(val_path)) throw IoError("missing dataset file: " + val_path.string());
  fs::create_directories(out_dir);

  tasks::Vocab vocab;
  const std::vector<tasks::Sample> train_set = tasks::read_jsonl(train_path.string(), vocab);
  const std::vector<tasks::Sample> val_set = tasks::read_jsonl(val_path.string(), vocab);
  if (train_set.empty()) throw IoError("empty training set: " + train_path.string());

  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  ConnectionSpec spec;
  spec.alpha = cfg.alpha;
  spec.group_size = cfg.group_size;
  spec.proj_rank = cfg.proj_rank;
  if (cfg.method == "turboconn") spec.connections = cfg.connections;

  std::shared_ptr<Model> model;
  std::int64_t global_step = 0;
  int start_epoch = 0;
  std::int64_t adam_t = 0;
  std::map<std::string, Tensor> opt_state;
  if (!resume_checkpoint.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume_checkpoint);
    model = ck.model;
    global_step = ck.meta.step;
    adam_t = ck.meta.adam_t;
    opt_state = std::move(ck.opt_state);
  } else {
    model = std::make_shared<Model>(mc, spec, cfg.seed);
  }

  AdamW opt(model->trainable_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  if (!opt_state.empty()) {
    opt.load_state(opt_state);
    opt.set_timestep(adam_t);
  }

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(train_set.size()) + cfg.batch_size - 1) / cfg.batch_size;
  start_epoch = static_cast<int>(global_step / steps_per_epoch);

  const fs::path metrics_path = fs::path(out_dir) / "metrics.csv";
  std::ofstream metrics(metrics_path, resume_checkpoint.empty()
                                          ? std::ios::out
                                          : std::ios::out | std::ios::app);
  if (!metrics) throw IoError("cannot open metrics log: " + metrics_path.string());
  if (resume_checkpoint.empty()) write_metrics_header(metrics);

  auto save = [&](const std::string& name, int epoch) {
    CheckpointMeta meta;
    meta.method = cfg.method;
    meta.soft_lambda = cfg.soft_lambda;
    meta.step = static_cast<int>(global_step);
    meta.epoch = epoch;
    meta.adam_t = opt.timestep();
    save_checkpoint((fs::path(out_dir) / name).string(), *model, meta, opt.state());
  };

  RunResult result;
  double last_loss = 0.0;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    // deterministic per-epoch shuffle, recomputable on resume
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5u + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    for (std::int64_t bi = 0; bi < steps_per_epoch; ++bi) {
      const std::int64_t this_step = static_cast<std::int64_t>(epoch) * steps_per_epoch + bi;
      if (this_step < global_step) continue;  // resuming mid-epoch

      std::vector<const tasks::Sample*> chunk;
      const std::size_t lo = static_cast<std::size_t>(bi) * cfg.batch_size;
      const std::size_t hi = std::min(train_set.size(), lo + cfg.batch_size);
      for (std::size_t s = lo; s < hi; ++s) chunk.push_back(&train_set[order[s]]);

      const float lr = lr_at(global_step, cfg);
      double loss;
      try {
        loss = train_step(*model, assemble_batch(chunk, vocab), opt, lr, cfg);
      } catch (const NumericError& e) {
        std::ostringstream os;
        os << e.what() << " [step " << global_step << ", lr " << lr << ", max|grad| "
           << opt.max_abs_grad() << "]";
        throw NumericError(os.str());
      }
      last_loss = loss;

      if (global_step % cfg.log_every == 0 || bi == steps_per_epoch - 1) {
        metrics << global_step << ',' << epoch << ',' << loss << ',' << lr << ",\n";
        metrics.flush();
      }
      ++global_step;
      if (cfg.checkpoint_every > 0 && global_step % cfg.checkpoint_every == 0)
        save("ckpt_step" + std::to_string(global_step) + ".bin", epoch);
    }

    // per-epoch validation
    const std::size_t vn = std::min<std::size_t>(val_set.size(),
                                                 static_cast<std::size_t>(cfg.val_max));
    double val_acc = 0.0;
    if (vn > 0) {
      const std::vector<tasks::Sample> val_slice(val_set.begin(),
                                                 val_set.begin() + static_cast<std::ptrdiff_t>(vn));
      val_acc = evalkit::accuracy(*model, vocab, val_slice, cfg.val_temperature,
                                  mix_seed(cfg.seed, 0xe7a1ULL + static_cast<std::uint64_t>(epoch)),
                                  method_of(cfg), cfg.soft_lambda);
    }
    metrics << global_step << ',' << epoch << ",,," << val_acc << '\n';
    metrics.flush();
    result.final_val_accuracy = val_acc;
    save("ckpt_epoch" + std::to_string(epoch) + ".bin", epoch);
  }

  save("final.bin", cfg.epochs - 1);
  result.final_loss = last_loss;
  result.steps = global_step;
  result.metrics_path = metrics_path.string();
  result.final_checkpoint = (fs::path(out_dir) / "final.bin").string();
  return result;
}

}  // namespace turbo::trainer
