#include "wbm/model.hpp"

#include <json.hpp>

#include "wbm/errors.hpp"

namespace wbm::model {

const char* tokenizer_name(TokenizerKind k) {
  switch (k) {
    case TokenizerKind::Tst: return "tst";
    case TokenizerKind::Mtan: return "mtan";
    case TokenizerKind::Tuple: return "tuple";
  }
  return "?";
}

const char* backbone_name(BackboneKind k) {
  switch (k) {
    case BackboneKind::LearnedPosAttention: return "learned_pos";
    case BackboneKind::RotaryAttention: return "rotary";
    case BackboneKind::BiMamba2: return "bimamba2";
  }
  return "?";
}

TokenizerKind tokenizer_from_name(const std::string& name) {
  if (name == "tst") return TokenizerKind::Tst;
  if (name == "mtan") return TokenizerKind::Mtan;
  if (name == "tuple") return TokenizerKind::Tuple;
  throw ConfigError("unknown tokenizer '" + name + "' (expected tst|mtan|tuple)");
}

BackboneKind backbone_from_name(const std::string& name) {
  if (name == "learned_pos") return BackboneKind::LearnedPosAttention;
  if (name == "rotary") return BackboneKind::RotaryAttention;
  if (name == "bimamba2") return BackboneKind::BiMamba2;
  throw ConfigError("unknown backbone '" + name + "' (expected learned_pos|rotary|bimamba2)");
}

void ModelConfig::validate() const {
  if (dim <= 0) throw ConfigError("model.dim must be positive");
  if (layers < 0) throw ConfigError("model.layers must be >= 0");
  if (ff_mult <= 0) throw ConfigError("model.ff_mult must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
  if (backbone != BackboneKind::BiMamba2) {
    if (heads <= 0 || dim % heads != 0) throw ConfigError("model.dim must be divisible by model.heads");
    if ((dim / heads) % 2 != 0 && backbone == BackboneKind::RotaryAttention) {
      throw ConfigError("rotary attention needs an even head dimension");
    }
  } else {
    if (layers % 2 != 0) throw ConfigError("bimamba2 needs an even layer count (forward + backward)");
    if (mamba.state_dim <= 0 || mamba.head_dim <= 0 || mamba.conv_width <= 0 || mamba.chunk <= 0 ||
        mamba.expand <= 0) {
      throw ConfigError("model.mamba dimensions must be positive");
    }
    if (mamba_inner() % mamba.head_dim != 0) {
      throw ConfigError("model.mamba.head_dim must divide expand*dim");
    }
  }
  if (tokenizer == TokenizerKind::Tst && tst_hidden_mult <= 0) {
    throw ConfigError("model.tst_hidden_mult must be positive");
  }
  if (tokenizer == TokenizerKind::Mtan && mtan_time_dim <= 0) {
    throw ConfigError("model.mtan_time_dim must be positive");
  }
  if (tokenizer == TokenizerKind::Tuple && tuple_value_hidden <= 0) {
    throw ConfigError("model.tuple_value_hidden must be positive");
  }
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["tokenizer"] = tokenizer_name(tokenizer);
  j["backbone"] = backbone_name(backbone);
  j["dim"] = dim;
  j["layers"] = layers;
  j["heads"] = heads;
  j["ff_mult"] = ff_mult;
  j["dropout"] = dropout;
  j["norm"] = norm == NormKind::LayerNorm ? "layernorm" : "rmsnorm";
  j["tst_hidden_mult"] = tst_hidden_mult;
  j["mtan_time_dim"] = mtan_time_dim;
  j["tuple_value_hidden"] = tuple_value_hidden;
  j["mamba"] = {{"state_dim", mamba.state_dim},
                {"head_dim", mamba.head_dim},
                {"conv_width", mamba.conv_width},
                {"chunk", mamba.chunk},
                {"expand", mamba.expand}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ModelConfig cfg;
  cfg.tokenizer = tokenizer_from_name(j.at("tokenizer").get<std::string>());
  cfg.backbone = backbone_from_name(j.at("backbone").get<std::string>());
  cfg.dim = j.at("dim").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.ff_mult = j.at("ff_mult").get<int>();
  cfg.dropout = j.at("dropout").get<double>();
  std::string norm = j.at("norm").get<std::string>();
  if (norm == "layernorm") {
    cfg.norm = NormKind::LayerNorm;
  } else if (norm == "rmsnorm") {
    cfg.norm = NormKind::RmsNorm;
  } else {
    throw ConfigError("unknown norm '" + norm + "'");
  }
  cfg.tst_hidden_mult = j.at("tst_hidden_mult").get<int>();
  cfg.mtan_time_dim = j.at("mtan_time_dim").get<int>();
  cfg.tuple_value_hidden = j.at("tuple_value_hidden").get<int>();
  const auto& m = j.at("mamba");
  cfg.mamba.state_dim = m.at("state_dim").get<int>();
  cfg.mamba.head_dim = m.at("head_dim").get<int>();
  cfg.mamba.conv_width = m.at("conv_width").get<int>();
  cfg.mamba.chunk = m.at("chunk").get<int>();
  cfg.mamba.expand = m.at("expand").get<int>();
  cfg.validate();
  return cfg;
}

std::pair<MatrixD, MatrixD> rope_tables(const std::vector<int>& positions, int width) {
  if (width % 2 != 0) throw ContractError("rotary width must be even");
  const int half = width / 2;
  MatrixD c(static_cast<Eigen::Index>(positions.size()), half);
  MatrixD s(static_cast<Eigen::Index>(positions.size()), half);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (int j = 0; j < half; ++j) {
      double theta = static_cast<double>(positions[i]) *
                     std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(width));
      c(static_cast<Eigen::Index>(i), j) = std::cos(theta);
      s(static_cast<Eigen::Index>(i), j) = std::sin(theta);
    }
  }
  return {std::move(c), std::move(s)};
}

MatrixD rope_rotate(const MatrixD& x, const std::vector<int>& positions) {
  if (static_cast<std::size_t>(x.rows()) != positions.size()) {
    throw ContractError("rope_rotate: one position per row required");
  }
  auto [c, s] = rope_tables(positions, static_cast<int>(x.cols()));
  const Eigen::Index half = x.cols() / 2;
  MatrixD out(x.rows(), x.cols());
  out.leftCols(half) = x.leftCols(half).cwiseProduct(c) - x.rightCols(half).cwiseProduct(s);
  out.rightCols(half) = x.leftCols(half).cwiseProduct(s) + x.rightCols(half).cwiseProduct(c);
  return out;
}

}  // namespace wbm::model
