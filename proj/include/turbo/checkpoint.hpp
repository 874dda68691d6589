#pragma once

#include <map>
#include <memory>
#include <string>

#include "turbo/model.hpp"

namespace turbo {

struct CheckpointMeta {
  std::string method = "baseline";  // baseline | turboconn | softtoken
  float soft_lambda = 0.0f;
  int step = 0;
  int epoch = 0;
  std::int64_t adam_t = 0;  // optimizer timestep
  std::string rng_state;
};

// Versioned binary container: magic + JSON header (config, connections, LoRA,
// run metadata) followed by named fp32 blobs. Optimizer moments ride along as
// "opt.m.<param>" / "opt.v.<param>" blobs.
void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta,
                     const std::map<std::string, Tensor>& opt_state = {});

struct LoadedCheckpoint {
  std::shared_ptr<Model> model;
  CheckpointMeta meta;
  std::map<std::string, Tensor> opt_state;
};

// Rebuilds the model from the header and loads every parameter blob,
// validating each shape against the freshly constructed model.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace turbo
