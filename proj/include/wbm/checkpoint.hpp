#pragma once

#include <filesystem>
#include <string>

#include "wbm/model.hpp"
#include "wbm/nn.hpp"
#include "wbm/pipeline.hpp"

namespace wbm::checkpoint {

// Everything an embed run needs: the model config, trained parameters,
// auxiliary state (projection-head running statistics), and the training
// split's normalization constants.
struct Checkpoint {
  model::ModelConfig config;
  nn::ParamTree<float> params;
  nn::ParamTree<float> state;
  pipeline::NormStats stats;
};

// Binary layout (all little-endian): magic "WBMC", version u32, config JSON
// (u32 length + bytes), per-variable norm stats, parameter and state tensor
// sections (name, rows, cols, row-major f32 data), then a u64 FNV-1a
// checksum over every preceding byte.
std::string to_bytes(const Checkpoint& ckpt);
Checkpoint from_bytes(const std::string& bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

// Rejects name or shape mismatches between a freshly initialized tree and a
// loaded one.
void check_params_match(const nn::ParamTree<float>& expected, const nn::ParamTree<float>& actual);

}  // namespace wbm::checkpoint
