#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "turbo/checkpoint.hpp"
#include "turbo/model.hpp"
#include "turbo/tasks.hpp"

namespace turbo::trainer {

struct TrainConfig {
  int batch_size = 64;
  int epochs = 3;
  float lr_max = 3e-4f;
  int period = 1000;
  int warmup = 100;
  float alpha = 1.0f;
  int group_size = 1;
  std::uint64_t seed = 42;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float weight_decay = 0.01f;
  float clip_norm = 1.0f;
  std::string method = "baseline";  // baseline | turboconn | softtoken
  float soft_lambda = 0.1f;
  int log_every = 10;
  int checkpoint_every = 0;  // extra mid-epoch checkpoints every N steps (0 = off)
  int val_max = 256;
  float val_temperature = 0.01f;
  int proj_rank = 16;
  ModelConfig model;
  std::vector<Connection> connections;  // used when method == turboconn

  void validate() const;
};

// key = value lines; '#' starts a comment. Unknown keys are an error.
TrainConfig load_train_config(const std::string& path);

// warmup from 0 to lr_max over `warmup` steps, cosine decay back to 0 over
// the rest of the period, repeating every `period` steps
float lr_at(std::int64_t step, const TrainConfig& cfg);

// Adam with decoupled weight decay over named parameter handles.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, float beta1, float beta2, float eps,
        float weight_decay);

  void zero_grad();
  // global-norm clipping; returns the pre-clip norm
  double clip_global_norm(double max_norm);
  double max_abs_grad() const;
  void step(float lr);

  std::int64_t timestep() const { return t_; }
  void set_timestep(std::int64_t t) { t_ = t; }
  std::map<std::string, Tensor> state() const;          // "opt.m.<name>", "opt.v.<name>"
  void load_state(const std::map<std::string, Tensor>& s);

 private:
  struct Slot {
    std::string name;
    Tensor param, m, v;
  };
  std::vector<Slot> slots_;
  float beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
};

struct Batch {
  std::vector<std::vector<int>> tokens;  // right-padded to a common length
  std::vector<int> targets;              // flat [b * k]
  std::vector<std::uint8_t> mask;        // flat [b * k]; true over completion + eos targets
};

// Builds next-token training rows: input is prompt+completion+eos, the mask
// supervises exactly the positions whose target is a completion token or the
// terminating eos.
Batch assemble_batch(const std::vector<const tasks::Sample*>& samples,
                     const tasks::Vocab& vocab);

// forward (grouped or soft-token per cfg.method), masked cross entropy,
// backward, clip, optimizer update; returns the pre-update loss
double train_step(const Model& model, const Batch& batch, AdamW& opt, float lr,
                  const TrainConfig& cfg);

struct RunResult {
  double final_val_accuracy = 0.0;
  double final_loss = 0.0;
  std::int64_t steps = 0;
  std::string metrics_path;
  std::string final_checkpoint;
};

RunResult run(const TrainConfig& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume_checkpoint = "");

}  // namespace turbo::trainer
