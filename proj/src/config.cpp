#include "wbm/config.hpp"

#include <json.hpp>

#include <set>

#include "wbm/errors.hpp"

namespace wbm::cli {

using nlohmann::json;

namespace {

std::string join_path(const std::string& scope, const std::string& key) {
  return scope.empty() ? key : scope + "." + key;
}

// Rejects keys outside `allowed`, with the full path in the message.
void check_keys(const json& obj, const std::string& scope, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError("config section '" + scope + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + join_path(scope, key) + "'");
  }
}

template <typename T>
void fetch(const json& obj, const std::string& scope, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for config key '" + join_path(scope, key) + "'");
  }
}

void fetch_var_map(const json& obj, const std::string& scope, const char* key,
                   std::array<double, kNumVariables>& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  std::string path = join_path(scope, key);
  if (!it->is_object()) throw ConfigError("config key '" + path + "' must map variable names to numbers");
  for (const auto& [name, value] : it->items()) {
    int var = variable_id_by_name(name);
    if (var < 0) throw ConfigError("unknown variable '" + join_path(path, name) + "'");
    if (!value.is_number()) throw ConfigError("bad value for '" + join_path(path, name) + "'");
    out[static_cast<std::size_t>(var)] = value.get<double>();
  }
}

int trait_index(const std::string& name) {
  for (int k = 0; k < synthgen::kNumTraits; ++k) {
    if (name == synthgen::trait_name(k)) return k;
  }
  return -1;
}

}  // namespace

std::string DataConfig::measurements_path() const {
  return measurements.empty() ? out_dir + "/measurements.csv" : measurements;
}
std::string DataConfig::labels_path() const {
  return labels.empty() ? out_dir + "/labels.csv" : labels;
}
std::string DataConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir + "/checkpoint.wbmc" : checkpoint;
}
std::string DataConfig::embeddings_path() const {
  return embeddings.empty() ? out_dir + "/embeddings.wbme" : embeddings;
}
std::string DataConfig::splits_path() const {
  return splits.empty() ? out_dir + "/splits.csv" : splits;
}

pretrain::PretrainConfig RunConfig::pretrain_config() const {
  pretrain::PretrainConfig cfg;
  cfg.model = model;
  cfg.loss = loss;
  cfg.optim = optim;
  cfg.batch_pairs = batch_pairs;
  cfg.epochs = epochs;
  cfg.seed = data.seed;
  return cfg;
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.model.tokenizer = model::TokenizerKind::Tst;
  cfg.model.backbone = model::BackboneKind::BiMamba2;
  return cfg;
}

RunConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg = default_config();
  check_keys(root, "",
             {"data", "generator", "pipeline", "model", "loss", "optimizer", "train", "probe",
              "ablate"});

  if (root.contains("data")) {
    const json& j = root["data"];
    check_keys(j, "data",
               {"out_dir", "measurements", "labels", "checkpoint", "embeddings", "splits", "seed"});
    fetch(j, "data", "out_dir", cfg.data.out_dir);
    fetch(j, "data", "measurements", cfg.data.measurements);
    fetch(j, "data", "labels", cfg.data.labels);
    fetch(j, "data", "checkpoint", cfg.data.checkpoint);
    fetch(j, "data", "embeddings", cfg.data.embeddings);
    fetch(j, "data", "splits", cfg.data.splits);
    fetch(j, "data", "seed", cfg.data.seed);
  }

  cfg.generator = synthgen::GeneratorConfig::defaults(100, 8, cfg.data.seed);
  if (root.contains("generator")) {
    const json& j = root["generator"];
    check_keys(j, "generator",
               {"n_subjects", "weeks_per_subject", "span_weeks", "event_probability",
                "event_duration_weeks", "noise_scale", "weekly_rates", "draw_rate_overrides",
                "effects", "event_shifts", "event_multipliers"});
    fetch(j, "generator", "n_subjects", cfg.generator.n_subjects);
    fetch(j, "generator", "weeks_per_subject", cfg.generator.weeks_per_subject);
    fetch(j, "generator", "span_weeks", cfg.generator.span_weeks);
    fetch(j, "generator", "event_probability", cfg.generator.event_probability);
    fetch(j, "generator", "event_duration_weeks", cfg.generator.event_duration_weeks);
    fetch(j, "generator", "noise_scale", cfg.generator.noise_scale);
    fetch_var_map(j, "generator", "weekly_rates", cfg.generator.weekly_rates);
    std::array<double, kNumVariables> overrides = cfg.generator.draw_rate_override;
    fetch_var_map(j, "generator", "draw_rate_overrides", overrides);
    cfg.generator.draw_rate_override = overrides;
    fetch_var_map(j, "generator", "event_shifts", cfg.generator.event_shift);
    fetch_var_map(j, "generator", "event_multipliers", cfg.generator.event_multiplier);
    if (j.contains("effects")) {
      const json& eff = j["effects"];
      if (!eff.is_object()) throw ConfigError("generator.effects must be an object");
      for (const auto& [trait, vars] : eff.items()) {
        int t = trait_index(trait);
        if (t < 0) throw ConfigError("unknown trait 'generator.effects." + trait + "'");
        if (!vars.is_object()) throw ConfigError("generator.effects." + trait + " must be an object");
        for (const auto& [var_name, value] : vars.items()) {
          int v = variable_id_by_name(var_name);
          if (v < 0) {
            throw ConfigError("unknown variable 'generator.effects." + trait + "." + var_name + "'");
          }
          if (!value.is_number()) {
            throw ConfigError("bad value for 'generator.effects." + trait + "." + var_name + "'");
          }
          cfg.generator.effect_coefficients(t, v) = value.get<double>();
        }
      }
    }
  }
  cfg.generator.rng_seed = cfg.data.seed;

  if (root.contains("pipeline")) {
    const json& j = root["pipeline"];
    check_keys(j, "pipeline", {"clip_z", "wear_min_days", "min_weeks", "min_span_weeks"});
    fetch(j, "pipeline", "clip_z", cfg.clip_z);
    fetch(j, "pipeline", "wear_min_days", cfg.filters.wear_min_days);
    fetch(j, "pipeline", "min_weeks", cfg.filters.min_weeks);
    fetch(j, "pipeline", "min_span_weeks", cfg.filters.min_span_weeks);
  }

  if (root.contains("model")) {
    const json& j = root["model"];
    check_keys(j, "model",
               {"tokenizer", "backbone", "dim", "layers", "heads", "ff_mult", "dropout", "norm",
                "tst_hidden_mult", "mtan_time_dim", "tuple_value_hidden", "mamba"});
    std::string tok = model::tokenizer_name(cfg.model.tokenizer);
    std::string bb = model::backbone_name(cfg.model.backbone);
    fetch(j, "model", "tokenizer", tok);
    fetch(j, "model", "backbone", bb);
    cfg.model.tokenizer = model::tokenizer_from_name(tok);
    cfg.model.backbone = model::backbone_from_name(bb);
    fetch(j, "model", "dim", cfg.model.dim);
    fetch(j, "model", "layers", cfg.model.layers);
    fetch(j, "model", "heads", cfg.model.heads);
    fetch(j, "model", "ff_mult", cfg.model.ff_mult);
    fetch(j, "model", "dropout", cfg.model.dropout);
    std::string norm = cfg.model.norm == model::NormKind::LayerNorm ? "layernorm" : "rmsnorm";
    fetch(j, "model", "norm", norm);
    if (norm == "layernorm") {
      cfg.model.norm = model::NormKind::LayerNorm;
    } else if (norm == "rmsnorm") {
      cfg.model.norm = model::NormKind::RmsNorm;
    } else {
      throw ConfigError("unknown norm 'model.norm=" + norm + "'");
    }
    fetch(j, "model", "tst_hidden_mult", cfg.model.tst_hidden_mult);
    fetch(j, "model", "mtan_time_dim", cfg.model.mtan_time_dim);
    fetch(j, "model", "tuple_value_hidden", cfg.model.tuple_value_hidden);
    if (j.contains("mamba")) {
      const json& m = j["mamba"];
      check_keys(m, "model.mamba", {"state_dim", "head_dim", "conv_width", "chunk", "expand"});
      fetch(m, "model.mamba", "state_dim", cfg.model.mamba.state_dim);
      fetch(m, "model.mamba", "head_dim", cfg.model.mamba.head_dim);
      fetch(m, "model.mamba", "conv_width", cfg.model.mamba.conv_width);
      fetch(m, "model.mamba", "chunk", cfg.model.mamba.chunk);
      fetch(m, "model.mamba", "expand", cfg.model.mamba.expand);
    }
  }

  if (root.contains("loss")) {
    const json& j = root["loss"];
    check_keys(j, "loss", {"temperature", "koleo_weight", "token_drop"});
    fetch(j, "loss", "temperature", cfg.loss.temperature);
    fetch(j, "loss", "koleo_weight", cfg.loss.koleo_weight);
    fetch(j, "loss", "token_drop", cfg.loss.token_drop);
  }

  if (root.contains("optimizer")) {
    const json& j = root["optimizer"];
    check_keys(j, "optimizer",
               {"lr", "weight_decay", "beta1", "beta2", "eps", "warmup_steps", "start_factor",
                "gamma", "per_step_decay"});
    fetch(j, "optimizer", "lr", cfg.optim.lr);
    fetch(j, "optimizer", "weight_decay", cfg.optim.weight_decay);
    fetch(j, "optimizer", "beta1", cfg.optim.beta1);
    fetch(j, "optimizer", "beta2", cfg.optim.beta2);
    fetch(j, "optimizer", "eps", cfg.optim.eps);
    fetch(j, "optimizer", "warmup_steps", cfg.optim.warmup_steps);
    fetch(j, "optimizer", "start_factor", cfg.optim.start_factor);
    fetch(j, "optimizer", "gamma", cfg.optim.gamma);
    fetch(j, "optimizer", "per_step_decay", cfg.optim.per_step_decay);
  }

  if (root.contains("train")) {
    const json& j = root["train"];
    check_keys(j, "train", {"batch_pairs", "epochs"});
    fetch(j, "train", "batch_pairs", cfg.batch_pairs);
    fetch(j, "train", "epochs", cfg.epochs);
  }

  if (root.contains("probe")) {
    const json& j = root["probe"];
    check_keys(j, "probe",
               {"tasks", "penalties", "folds", "resamples", "baseline", "reconstruction",
                "group_by_sex"});
    fetch(j, "probe", "tasks", cfg.probe.tasks);
    fetch(j, "probe", "penalties", cfg.probe.penalties);
    fetch(j, "probe", "folds", cfg.probe.folds);
    fetch(j, "probe", "resamples", cfg.probe.resamples);
    fetch(j, "probe", "baseline", cfg.probe.baseline);
    fetch(j, "probe", "reconstruction", cfg.probe.reconstruction);
    fetch(j, "probe", "group_by_sex", cfg.probe.group_by_sex);
    for (const auto& t : cfg.probe.tasks) {
      if (t != "age" && t != "sex" && t != "event") {
        throw ConfigError("unknown probe task '" + t + "' (expected age|sex|event)");
      }
    }
  }

  if (root.contains("ablate")) {
    const json& j = root["ablate"];
    check_keys(j, "ablate",
               {"tokenizers", "backbones", "epochs", "batch_pairs", "full_grid", "batch_grid",
                "layers_grid", "weight_decay_grid", "koleo_grid"});
    fetch(j, "ablate", "tokenizers", cfg.ablate.tokenizers);
    fetch(j, "ablate", "backbones", cfg.ablate.backbones);
    fetch(j, "ablate", "epochs", cfg.ablate.epochs);
    fetch(j, "ablate", "batch_pairs", cfg.ablate.batch_pairs);
    fetch(j, "ablate", "full_grid", cfg.ablate.full_grid);
    fetch(j, "ablate", "batch_grid", cfg.ablate.batch_grid);
    fetch(j, "ablate", "layers_grid", cfg.ablate.layers_grid);
    fetch(j, "ablate", "weight_decay_grid", cfg.ablate.weight_decay_grid);
    fetch(j, "ablate", "koleo_grid", cfg.ablate.koleo_grid);
    for (const auto& t : cfg.ablate.tokenizers) model::tokenizer_from_name(t);
    for (const auto& b : cfg.ablate.backbones) model::backbone_from_name(b);
  }

  return cfg;
}

std::string resolved_json(const RunConfig& cfg) {
  json root;
  root["data"] = {{"out_dir", cfg.data.out_dir},
                  {"measurements", cfg.data.measurements},
                  {"labels", cfg.data.labels},
                  {"checkpoint", cfg.data.checkpoint},
                  {"embeddings", cfg.data.embeddings},
                  {"splits", cfg.data.splits},
                  {"seed", cfg.data.seed}};

  json weekly_rates = json::object();
  json overrides = json::object();
  json shifts = json::object();
  json mults = json::object();
  for (int v = 0; v < kNumVariables; ++v) {
    std::string name(variable_spec(v).name);
    weekly_rates[name] = cfg.generator.weekly_rates[static_cast<std::size_t>(v)];
    overrides[name] = cfg.generator.draw_rate_override[static_cast<std::size_t>(v)];
    shifts[name] = cfg.generator.event_shift[static_cast<std::size_t>(v)];
    mults[name] = cfg.generator.event_multiplier[static_cast<std::size_t>(v)];
  }
  json effects = json::object();
  for (int t = 0; t < synthgen::kNumTraits; ++t) {
    json per_var = json::object();
    for (int v = 0; v < kNumVariables; ++v) {
      double c = cfg.generator.effect_coefficients(t, v);
      if (c != 0.0) per_var[std::string(variable_spec(v).name)] = c;
    }
    effects[synthgen::trait_name(t)] = per_var;
  }
  root["generator"] = {{"n_subjects", cfg.generator.n_subjects},
                       {"weeks_per_subject", cfg.generator.weeks_per_subject},
                       {"span_weeks", cfg.generator.span_weeks},
                       {"event_probability", cfg.generator.event_probability},
                       {"event_duration_weeks", cfg.generator.event_duration_weeks},
                       {"noise_scale", cfg.generator.noise_scale},
                       {"weekly_rates", weekly_rates},
                       {"draw_rate_overrides", overrides},
                       {"effects", effects},
                       {"event_shifts", shifts},
                       {"event_multipliers", mults}};

  root["pipeline"] = {{"clip_z", cfg.clip_z},
                      {"wear_min_days", cfg.filters.wear_min_days},
                      {"min_weeks", cfg.filters.min_weeks},
                      {"min_span_weeks", cfg.filters.min_span_weeks}};

  root["model"] = json::parse(cfg.model.to_json());

  root["loss"] = {{"temperature", cfg.loss.temperature},
                  {"koleo_weight", cfg.loss.koleo_weight},
                  {"token_drop", cfg.loss.token_drop}};

  root["optimizer"] = {{"lr", cfg.optim.lr},
                       {"weight_decay", cfg.optim.weight_decay},
                       {"beta1", cfg.optim.beta1},
                       {"beta2", cfg.optim.beta2},
                       {"eps", cfg.optim.eps},
                       {"warmup_steps", cfg.optim.warmup_steps},
                       {"start_factor", cfg.optim.start_factor},
                       {"gamma", cfg.optim.gamma},
                       {"per_step_decay", cfg.optim.per_step_decay}};

  root["train"] = {{"batch_pairs", cfg.batch_pairs}, {"epochs", cfg.epochs}};

  root["probe"] = {{"tasks", cfg.probe.tasks},       {"penalties", cfg.probe.penalties},
                   {"folds", cfg.probe.folds},       {"resamples", cfg.probe.resamples},
                   {"baseline", cfg.probe.baseline}, {"reconstruction", cfg.probe.reconstruction},
                   {"group_by_sex", cfg.probe.group_by_sex}};

  root["ablate"] = {{"tokenizers", cfg.ablate.tokenizers},
                    {"backbones", cfg.ablate.backbones},
                    {"epochs", cfg.ablate.epochs},
                    {"batch_pairs", cfg.ablate.batch_pairs},
                    {"full_grid", cfg.ablate.full_grid},
                    {"batch_grid", cfg.ablate.batch_grid},
                    {"layers_grid", cfg.ablate.layers_grid},
                    {"weight_decay_grid", cfg.ablate.weight_decay_grid},
                    {"koleo_grid", cfg.ablate.koleo_grid}};

  return root.dump(2) + "\n";
}

}  // namespace wbm::cli
