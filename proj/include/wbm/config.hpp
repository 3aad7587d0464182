#pragma once

#include <string>
#include <vector>

#include "wbm/evalharness.hpp"
#include "wbm/pipeline.hpp"
#include "wbm/pretrain.hpp"
#include "wbm/synthgen.hpp"

namespace wbm::cli {

struct DataConfig {
  std::string out_dir = "out";
  std::string measurements = "";  // default: <out_dir>/measurements.csv
  std::string labels = "";
  std::string checkpoint = "";
  std::string embeddings = "";
  std::string splits = "";
  std::uint64_t seed = 1;

  std::string measurements_path() const;
  std::string labels_path() const;
  std::string checkpoint_path() const;
  std::string embeddings_path() const;
  std::string splits_path() const;
};

struct ProbeConfig {
  std::vector<std::string> tasks = {"age", "sex", "event"};
  std::vector<double> penalties;  // empty = default grid
  int folds = 5;
  int resamples = 1000;
  bool baseline = true;
  bool reconstruction = false;  // weekly-mean reconstruction table
  bool group_by_sex = false;
};

struct AblateConfig {
  std::vector<std::string> tokenizers = {"tst", "mtan", "tuple"};
  std::vector<std::string> backbones = {"learned_pos", "rotary", "bimamba2"};
  int epochs = 1;
  int batch_pairs = 16;
  bool full_grid = false;
  std::vector<int> batch_grid = {128, 192};
  std::vector<int> layers_grid = {12, 16};
  std::vector<double> weight_decay_grid = {0.01, 0.001};
  std::vector<double> koleo_grid = {0.1, 0.2};
};

// Full run configuration; every command consumes the sections it needs and
// echoes the resolved form next to its outputs. Unknown keys anywhere are
// rejected.
struct RunConfig {
  DataConfig data;
  synthgen::GeneratorConfig generator = synthgen::GeneratorConfig::defaults(100, 8, 1);
  pipeline::FilterConfig filters;
  double clip_z = 4.0;
  model::ModelConfig model;  // defaults mirror the final trained configuration
  pretrain::LossConfig loss;
  pretrain::OptimConfig optim;
  int batch_pairs = 192;
  int epochs = 6;
  ProbeConfig probe;
  AblateConfig ablate;

  pretrain::PretrainConfig pretrain_config() const;
};

RunConfig default_config();

// Strict parse: unknown keys raise ConfigError naming the full key path.
RunConfig parse_config(const std::string& json_text);

// Fully resolved echo; parse_config(resolved_json(c)) reproduces c.
std::string resolved_json(const RunConfig& cfg);

}  // namespace wbm::cli
