#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wbm/data.hpp"
#include "wbm/nn.hpp"
#include "wbm/pipeline.hpp"
#include "wbm/tape.hpp"

namespace wbm::model {

enum class TokenizerKind { Tst, Mtan, Tuple };
enum class BackboneKind { LearnedPosAttention, RotaryAttention, BiMamba2 };
enum class NormKind { LayerNorm, RmsNorm };

const char* tokenizer_name(TokenizerKind k);
const char* backbone_name(BackboneKind k);
TokenizerKind tokenizer_from_name(const std::string& name);
BackboneKind backbone_from_name(const std::string& name);

struct MambaDims {
  int state_dim = 16;
  int head_dim = 32;
  int conv_width = 4;
  int chunk = 32;
  int expand = 2;
};

struct ModelConfig {
  TokenizerKind tokenizer = TokenizerKind::Tst;
  BackboneKind backbone = BackboneKind::BiMamba2;
  int dim = 256;    // token/embedding width D
  int layers = 24;  // BiMamba2 counts both directions; must be even there
  int heads = 8;
  int ff_mult = 4;  // feed-forward width H = ff_mult * D
  double dropout = 0.027;
  NormKind norm = NormKind::LayerNorm;
  int tst_hidden_mult = 2;
  int mtan_time_dim = 16;
  int tuple_value_hidden = 16;
  MambaDims mamba;

  int ff_dim() const { return ff_mult * dim; }
  int mamba_inner() const { return mamba.expand * dim; }
  int mamba_heads() const { return mamba_inner() / mamba.head_dim; }

  // Time embeddings join the tuple sum only for the backbone that has no
  // positional mechanism of its own.
  bool tuple_add_time() const {
    return tokenizer == TokenizerKind::Tuple && backbone == BackboneKind::LearnedPosAttention;
  }

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

template <typename S>
nn::ParamTree<S> init_encoder_params(const ModelConfig& cfg, std::uint64_t seed);

// Projection head D -> 4D -> D with batch norm and dropout between layers;
// parameters live under "head." so they can be dropped at inference.
template <typename S>
nn::ParamTree<S> init_projection_params(int dim, std::uint64_t seed);

// ---------------------------------------------------------------------------
// encoding
// ---------------------------------------------------------------------------

template <typename S>
struct WeekTokens {
  ad::Var<S> seq;               // L x D
  std::vector<int> positions;   // hour-of-week per token
  std::vector<int> variable_ids;  // tuple tokenizer only
};

// Per-tape state shared across weeks (the mTAN attention logits depend only
// on parameters, not data).
template <typename S>
struct EncodeContext {
  std::optional<ad::Var<S>> mtan_logits;
};

// Number of tokens the tokenizer will produce for this grid.
int token_count(const ModelConfig& cfg, const WeekGrid& grid);

template <typename S>
WeekTokens<S> tokenize(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                       const WeekGrid& grid, EncodeContext<S>& ctx);

// Keeps tokens at `keep` (sorted ascending), preserving positions.
template <typename S>
WeekTokens<S> drop_tokens(const WeekTokens<S>& tokens, const std::vector<int>& keep);

// Sequence-to-sequence encoder; dropout_rng == nullptr disables dropout.
template <typename S>
ad::Var<S> encode_tokens(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                         const WeekTokens<S>& tokens, Rng* dropout_rng);

// Arithmetic mean over the sequence axis; errors on empty sequences.
template <typename S>
ad::Var<S> pool_mean(const ad::Var<S>& outputs);

template <typename S>
ad::Var<S> projection_head(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ad::Var<S>& x,
                           Rng* dropout_rng, nn::ParamTree<S>* bn_state);

// Single forward stack of Mamba blocks under `prefix` ("enc.f" / "enc.b");
// exposed so bidirectionality properties can be tested directly.
template <typename S>
ad::Var<S> mamba_stack(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                       const std::string& prefix, int layers, ad::Var<S> x, Rng* dropout_rng);

// ---------------------------------------------------------------------------
// rotary rotation (value level, used by both the encoder and property tests)
// ---------------------------------------------------------------------------

// Rotates each row of x (width must be even) by its position index using the
// split-half rotary scheme with base 10000.
MatrixD rope_rotate(const MatrixD& x, const std::vector<int>& positions);

// cos/sin tables for a position list: each L x (width/2).
std::pair<MatrixD, MatrixD> rope_tables(const std::vector<int>& positions, int width);

// ---------------------------------------------------------------------------
// implementation
// ---------------------------------------------------------------------------

namespace detail {

inline double inv_softplus(double y) { return std::log(std::expm1(y)); }

template <typename S>
void add_linear(nn::ParamTree<S>& p, const std::string& name, int in, int out, std::uint64_t seed) {
  p.add(name + ".w", nn::glorot_init<S>(in, out, nn::init_stream(seed, name + ".w")));
  p.add(name + ".b", Matrix<S>::Zero(1, out));
}

template <typename S>
void add_norm(nn::ParamTree<S>& p, const std::string& name, int width, NormKind kind) {
  p.add(name + ".g", Matrix<S>::Ones(1, width));
  if (kind == NormKind::LayerNorm) p.add(name + ".b", Matrix<S>::Zero(1, width));
}

template <typename S>
void add_mlp(nn::ParamTree<S>& p, const std::string& base, const ModelConfig& cfg, std::uint64_t seed) {
  add_linear(p, base + ".mlp.gate", cfg.dim, cfg.ff_dim(), seed);
  add_linear(p, base + ".mlp.up", cfg.dim, cfg.ff_dim(), seed);
  add_linear(p, base + ".mlp.down", cfg.ff_dim(), cfg.dim, seed);
}

template <typename S>
ad::Var<S> apply_linear(const nn::VarMap<S>& vars, const std::string& name, const ad::Var<S>& x) {
  return ad::matmul(x, vars.at(name + ".w")) + vars.at(name + ".b");
}

template <typename S>
ad::Var<S> apply_norm(const nn::VarMap<S>& vars, const ModelConfig& cfg, const std::string& name,
                      const ad::Var<S>& x) {
  if (cfg.norm == NormKind::LayerNorm) {
    return ad::layer_norm(x, vars.at(name + ".g"), vars.at(name + ".b"));
  }
  return ad::rms_norm(x, vars.at(name + ".g"));
}

// Inverted dropout by a constant mask; identity when rng is null or rate 0.
template <typename S>
ad::Var<S> dropout(ad::Tape<S>& tape, const ad::Var<S>& x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  Matrix<S> mask(x.rows(), x.cols());
  const S keep = static_cast<S>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j) {
      mask(i, j) = rng->bernoulli(1.0 - rate) ? keep : S(0);
    }
  }
  return x * tape.constant(std::move(mask));
}

template <typename S>
ad::Var<S> gated_mlp(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                     const std::string& base, const ad::Var<S>& x, Rng* rng) {
  ad::Var<S> g = ad::silu(apply_linear(vars, base + ".mlp.gate", x));
  ad::Var<S> u = apply_linear(vars, base + ".mlp.up", x);
  ad::Var<S> out = apply_linear(vars, base + ".mlp.down", g * u);
  return dropout(tape, out, cfg.dropout, rng);
}

template <typename S>
ad::Var<S> rope_apply(const ad::Var<S>& x, const ad::Var<S>& cosv, const ad::Var<S>& sinv) {
  const Eigen::Index half = x.cols() / 2;
  ad::Var<S> x1 = ad::cols(x, 0, half);
  ad::Var<S> x2 = ad::cols(x, half, half);
  return ad::hstack<S>({x1 * cosv - x2 * sinv, x1 * sinv + x2 * cosv});
}

template <typename S>
ad::Var<S> attention_block(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                           const std::string& base, const ad::Var<S>& x,
                           const std::vector<int>& positions, bool rotary, Rng* rng) {
  const Eigen::Index dh = cfg.dim / cfg.heads;
  ad::Var<S> h = apply_norm(vars, cfg, base + ".norm1", x);
  ad::Var<S> q = apply_linear(vars, base + ".q", h);
  ad::Var<S> k = apply_linear(vars, base + ".k", h);
  ad::Var<S> v = apply_linear(vars, base + ".v", h);

  ad::Var<S> cosv, sinv;
  if (rotary) {
    auto [c, s] = rope_tables(positions, static_cast<int>(dh));
    cosv = tape.constant(c.template cast<S>());
    sinv = tape.constant(s.template cast<S>());
  }

  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<ad::Var<S>> ctx;
  ctx.reserve(static_cast<std::size_t>(cfg.heads));
  for (int head = 0; head < cfg.heads; ++head) {
    ad::Var<S> qh = ad::cols(q, head * dh, dh);
    ad::Var<S> kh = ad::cols(k, head * dh, dh);
    ad::Var<S> vh = ad::cols(v, head * dh, dh);
    if (rotary) {
      qh = rope_apply(qh, cosv, sinv);
      kh = rope_apply(kh, cosv, sinv);
    }
    ad::Var<S> attn = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    ctx.push_back(ad::matmul(attn, vh));
  }
  ad::Var<S> out = apply_linear(vars, base + ".o", ad::hstack(ctx));
  return dropout(tape, out, cfg.dropout, rng);
}

// Depthwise causal convolution (width w) followed by silu.
template <typename S>
ad::Var<S> causal_conv_silu(const nn::VarMap<S>& vars, const std::string& base, const ad::Var<S>& x,
                            int width) {
  ad::Var<S> w = vars.at(base + ".conv.w");
  ad::Var<S> acc = x * ad::rows(w, 0, 1);
  for (int k = 1; k < width; ++k) acc = acc + ad::shift_rows(x, k) * ad::rows(w, k, 1);
  return ad::silu(acc + vars.at(base + ".conv.b"));
}

template <typename S>
ad::Var<S> mamba_mixer(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                       const std::string& base, const ad::Var<S>& x, Rng* rng) {
  const Eigen::Index di = cfg.mamba_inner();
  const Eigen::Index ns = cfg.mamba.state_dim;
  const Eigen::Index nh = cfg.mamba_heads();
  const Eigen::Index hd = cfg.mamba.head_dim;

  ad::Var<S> proj = apply_linear(vars, base + ".in", x);  // L x (2*di + 2*ns + nh)
  ad::Var<S> z = ad::cols(proj, 0, di);
  ad::Var<S> conv_in = ad::cols(proj, di, di + 2 * ns);  // x, B, C share the conv
  ad::Var<S> dt_raw = ad::cols(proj, 2 * di + 2 * ns, nh);

  ad::Var<S> conv_out = causal_conv_silu(vars, base, conv_in, cfg.mamba.conv_width);
  ad::Var<S> xs = ad::cols(conv_out, 0, di);
  ad::Var<S> bmat = ad::cols(conv_out, di, ns);
  ad::Var<S> cmat = ad::cols(conv_out, di + ns, ns);

  ad::Var<S> delta = ad::softplus(dt_raw + vars.at(base + ".dt_bias"));  // L x nh, positive
  ad::Var<S> a_pos = ad::softplus(vars.at(base + ".a_raw"));             // 1 x nh

  std::vector<ad::Var<S>> head_out;
  head_out.reserve(static_cast<std::size_t>(nh));
  for (Eigen::Index head = 0; head < nh; ++head) {
    ad::Var<S> dt_h = ad::cols(delta, head, 1);                      // L x 1
    ad::Var<S> a_h = ad::block(a_pos, 0, head, 1, 1);                // 1 x 1
    ad::Var<S> decay = ad::exp(-(dt_h * a_h));                       // in (0, 1)
    ad::Var<S> xh = ad::cols(xs, head * hd, hd);
    ad::Var<S> y = ad::ssd_scan(decay, xh * dt_h, bmat, cmat, cfg.mamba.chunk);
    ad::Var<S> skip = ad::block(vars.at(base + ".d_skip"), 0, head, 1, 1);
    head_out.push_back(y + xh * skip);
  }
  ad::Var<S> y = ad::hstack(head_out);           // L x di
  y = ad::rms_norm(y * ad::silu(z), vars.at(base + ".ssm_norm.g"));
  ad::Var<S> out = apply_linear(vars, base + ".out", y);
  return dropout(tape, out, cfg.dropout, rng);
}

}  // namespace detail

template <typename S>
ad::Var<S> mamba_stack(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                       const std::string& prefix, int layers, ad::Var<S> x, Rng* dropout_rng) {
  for (int l = 0; l < layers; ++l) {
    std::string base = prefix + std::to_string(l);
    x = x + detail::mamba_mixer(tape, vars, cfg, base,
                                detail::apply_norm(vars, cfg, base + ".norm1", x), dropout_rng);
    x = x + detail::gated_mlp(tape, vars, cfg, base,
                              detail::apply_norm(vars, cfg, base + ".norm2", x), dropout_rng);
  }
  return x;
}

template <typename S>
nn::ParamTree<S> init_encoder_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  nn::ParamTree<S> p;
  const int d = cfg.dim;

  switch (cfg.tokenizer) {
    case TokenizerKind::Tst: {
      int hidden = cfg.tst_hidden_mult * d;
      detail::add_linear(p, "tok.l1", kDenseWidth, hidden, seed);
      detail::add_linear(p, "tok.l2", hidden, d, seed);
      break;
    }
    case TokenizerKind::Mtan: {
      p.add("tok.time_table", nn::normal_init<S>(kHoursPerWeek, cfg.mtan_time_dim, 0.02,
                                                 nn::init_stream(seed, "tok.time_table")));
      detail::add_linear(p, "tok.q", cfg.mtan_time_dim, cfg.mtan_time_dim, seed);
      detail::add_linear(p, "tok.k", cfg.mtan_time_dim, cfg.mtan_time_dim, seed);
      detail::add_linear(p, "tok.proj", kNumVariables, d, seed);
      break;
    }
    case TokenizerKind::Tuple: {
      p.add("tok.var_table",
            nn::normal_init<S>(kNumVariables, d, 0.02, nn::init_stream(seed, "tok.var_table")));
      detail::add_linear(p, "tok.val1", 1, cfg.tuple_value_hidden, seed);
      detail::add_linear(p, "tok.val2", cfg.tuple_value_hidden, d, seed);
      if (cfg.tuple_add_time()) {
        p.add("tok.time_table",
              nn::normal_init<S>(kHoursPerWeek, d, 0.02, nn::init_stream(seed, "tok.time_table")));
      }
      break;
    }
  }

  if (cfg.backbone == BackboneKind::LearnedPosAttention) {
    p.add("enc.pos_table",
          nn::normal_init<S>(kHoursPerWeek, d, 0.02, nn::init_stream(seed, "enc.pos_table")));
  }

  auto add_mamba_layer = [&](const std::string& base) {
    const int di = cfg.mamba_inner();
    const int ns = cfg.mamba.state_dim;
    const int nh = cfg.mamba_heads();
    detail::add_norm(p, base + ".norm1", d, cfg.norm);
    detail::add_linear(p, base + ".in", d, 2 * di + 2 * ns + nh, seed);
    double conv_limit = 1.0 / std::sqrt(static_cast<double>(cfg.mamba.conv_width));
    p.add(base + ".conv.w", nn::uniform_init<S>(cfg.mamba.conv_width, di + 2 * ns, conv_limit,
                                                nn::init_stream(seed, base + ".conv.w")));
    p.add(base + ".conv.b", Matrix<S>::Zero(1, di + 2 * ns));
    {
      // softplus(dt_bias) lands log-uniform in [1e-3, 1e-1]
      Rng rng = nn::init_stream(seed, base + ".dt_bias");
      Matrix<S> dtb(1, nh);
      for (int i = 0; i < nh; ++i) {
        double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        dtb(0, i) = static_cast<S>(detail::inv_softplus(dt));
      }
      p.add(base + ".dt_bias", std::move(dtb));
    }
    {
      // softplus(a_raw) uniform in [1, 8]
      Rng rng = nn::init_stream(seed, base + ".a_raw");
      Matrix<S> ar(1, nh);
      for (int i = 0; i < nh; ++i) ar(0, i) = static_cast<S>(detail::inv_softplus(rng.uniform(1.0, 8.0)));
      p.add(base + ".a_raw", std::move(ar));
    }
    p.add(base + ".d_skip", Matrix<S>::Ones(1, nh));
    p.add(base + ".ssm_norm.g", Matrix<S>::Ones(1, di));
    detail::add_linear(p, base + ".out", di, d, seed);
    detail::add_norm(p, base + ".norm2", d, cfg.norm);
    detail::add_mlp(p, base, cfg, seed);
  };

  if (cfg.backbone == BackboneKind::BiMamba2) {
    const int half = cfg.layers / 2;
    for (int l = 0; l < half; ++l) add_mamba_layer("enc.f" + std::to_string(l));
    for (int l = 0; l < half; ++l) add_mamba_layer("enc.b" + std::to_string(l));
    detail::add_linear(p, "enc.comb1", 2 * d, 2 * d, seed);
    detail::add_linear(p, "enc.comb2", 2 * d, d, seed);
  } else {
    for (int l = 0; l < cfg.layers; ++l) {
      std::string base = "enc.l" + std::to_string(l);
      detail::add_norm(p, base + ".norm1", d, cfg.norm);
      detail::add_linear(p, base + ".q", d, d, seed);
      detail::add_linear(p, base + ".k", d, d, seed);
      detail::add_linear(p, base + ".v", d, d, seed);
      detail::add_linear(p, base + ".o", d, d, seed);
      detail::add_norm(p, base + ".norm2", d, cfg.norm);
      detail::add_mlp(p, base, cfg, seed);
    }
  }
  return p;
}

template <typename S>
nn::ParamTree<S> init_projection_params(int dim, std::uint64_t seed) {
  nn::ParamTree<S> p;
  detail::add_linear(p, "head.l1", dim, 4 * dim, seed);
  p.add("head.bn.g", Matrix<S>::Ones(1, 4 * dim));
  p.add("head.bn.b", Matrix<S>::Zero(1, 4 * dim));
  detail::add_linear(p, "head.l2", 4 * dim, dim, seed);
  return p;
}

inline int token_count(const ModelConfig& cfg, const WeekGrid& grid) {
  if (cfg.tokenizer == TokenizerKind::Tuple) return static_cast<int>(grid.observed_count());
  return kHoursPerWeek;
}

template <typename S>
WeekTokens<S> tokenize(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                       const WeekGrid& grid, EncodeContext<S>& ctx) {
  WeekTokens<S> out;
  switch (cfg.tokenizer) {
    case TokenizerKind::Tst: {
      Matrix<S> dense = pipeline::to_dense_features(grid).template cast<S>();
      ad::Var<S> x = tape.constant(std::move(dense));
      ad::Var<S> h = ad::silu(detail::apply_linear(vars, "tok.l1", x));
      out.seq = detail::apply_linear(vars, "tok.l2", h);
      out.positions.resize(kHoursPerWeek);
      for (int t = 0; t < kHoursPerWeek; ++t) out.positions[static_cast<std::size_t>(t)] = t;
      break;
    }
    case TokenizerKind::Mtan: {
      if (!ctx.mtan_logits.has_value()) {
        ad::Var<S> table = vars.at("tok.time_table");
        ad::Var<S> q = detail::apply_linear(vars, "tok.q", table);
        ad::Var<S> k = detail::apply_linear(vars, "tok.k", table);
        // The cited formulation scales by d_T itself, not sqrt(d_T).
        ctx.mtan_logits =
            ad::scale(ad::matmul(q, ad::transpose(k)), static_cast<S>(1.0 / cfg.mtan_time_dim));
      }
      std::vector<ad::Var<S>> channels;
      channels.reserve(kNumVariables);
      Matrix<S> values = grid.values.template cast<S>();
      for (int v = 0; v < kNumVariables; ++v) {
        // Unobserved key hours are excluded before the softmax; a fully
        // unobserved variable yields a zero channel.
        Matrix<S> keep(kHoursPerWeek, kHoursPerWeek);
        for (Eigen::Index j = 0; j < kHoursPerWeek; ++j) {
          keep.col(j).setConstant(grid.mask(j, v) ? S(1) : S(0));
        }
        ad::Var<S> attn = ad::softmax_rows_masked(*ctx.mtan_logits, keep);
        ad::Var<S> col = tape.constant(values.col(v));
        channels.push_back(ad::matmul(attn, col));
      }
      ad::Var<S> interpolated = ad::hstack(channels);  // 168 x 27
      out.seq = detail::apply_linear(vars, "tok.proj", interpolated);
      out.positions.resize(kHoursPerWeek);
      for (int t = 0; t < kHoursPerWeek; ++t) out.positions[static_cast<std::size_t>(t)] = t;
      break;
    }
    case TokenizerKind::Tuple: {
      auto stream = pipeline::to_tuple_stream(grid);
      if (stream.empty()) {
        out.seq = ad::Var<S>{};  // caller must reject empty sequences
        return out;
      }
      std::vector<int> var_ids, hours;
      Matrix<S> values(static_cast<Eigen::Index>(stream.size()), 1);
      for (std::size_t i = 0; i < stream.size(); ++i) {
        var_ids.push_back(stream[i].variable_id);
        hours.push_back(stream[i].hour);
        values(static_cast<Eigen::Index>(i), 0) = static_cast<S>(stream[i].value);
      }
      ad::Var<S> var_emb = ad::gather_rows(vars.at("tok.var_table"), var_ids);
      ad::Var<S> xval = tape.constant(std::move(values));
      ad::Var<S> val_emb = detail::apply_linear(
          vars, "tok.val2", ad::silu(detail::apply_linear(vars, "tok.val1", xval)));
      out.seq = var_emb + val_emb;
      if (cfg.tuple_add_time()) {
        out.seq = out.seq + ad::gather_rows(vars.at("tok.time_table"), hours);
      }
      out.positions = std::move(hours);
      out.variable_ids = std::move(var_ids);
      break;
    }
  }
  return out;
}

template <typename S>
WeekTokens<S> drop_tokens(const WeekTokens<S>& tokens, const std::vector<int>& keep) {
  if (keep.empty()) throw ContractError("drop_tokens: at least one token must survive");
  WeekTokens<S> out;
  out.seq = ad::gather_rows(tokens.seq, keep);
  out.positions.reserve(keep.size());
  for (int i : keep) {
    out.positions.push_back(tokens.positions.at(static_cast<std::size_t>(i)));
    if (!tokens.variable_ids.empty()) {
      out.variable_ids.push_back(tokens.variable_ids.at(static_cast<std::size_t>(i)));
    }
  }
  return out;
}

template <typename S>
ad::Var<S> encode_tokens(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ModelConfig& cfg,
                         const WeekTokens<S>& tokens, Rng* dropout_rng) {
  if (!tokens.seq.valid() || tokens.seq.rows() == 0) {
    throw ContractError("encode_tokens: empty token sequence");
  }
  for (int p : tokens.positions) {
    if (p < 0 || p >= kHoursPerWeek) throw ContractError("token position outside 0-167");
  }
  ad::Var<S> x = tokens.seq;
  switch (cfg.backbone) {
    case BackboneKind::LearnedPosAttention:
      x = x + ad::gather_rows(vars.at("enc.pos_table"), tokens.positions);
      [[fallthrough]];
    case BackboneKind::RotaryAttention: {
      const bool rotary = cfg.backbone == BackboneKind::RotaryAttention;
      for (int l = 0; l < cfg.layers; ++l) {
        std::string base = "enc.l" + std::to_string(l);
        x = x + detail::attention_block(tape, vars, cfg, base, x, tokens.positions, rotary, dropout_rng);
        x = x + detail::gated_mlp(tape, vars, cfg, base,
                                  detail::apply_norm(vars, cfg, base + ".norm2", x), dropout_rng);
      }
      return x;
    }
    case BackboneKind::BiMamba2: {
      const int half = cfg.layers / 2;
      ad::Var<S> fwd = mamba_stack(tape, vars, cfg, "enc.f", half, x, dropout_rng);
      ad::Var<S> bwd = mamba_stack(tape, vars, cfg, "enc.b", half, ad::reverse_rows(x), dropout_rng);
      ad::Var<S> cat = ad::hstack<S>({fwd, ad::reverse_rows(bwd)});
      ad::Var<S> h = ad::silu(detail::apply_linear(vars, "enc.comb1", cat));
      return detail::apply_linear(vars, "enc.comb2", h);
    }
  }
  throw ContractError("unknown backbone");
}

template <typename S>
ad::Var<S> pool_mean(const ad::Var<S>& outputs) {
  if (!outputs.valid() || outputs.rows() == 0) {
    throw ContractError("pool_mean: empty sequence");
  }
  return ad::colmean(outputs);
}

template <typename S>
ad::Var<S> projection_head(ad::Tape<S>& tape, const nn::VarMap<S>& vars, const ad::Var<S>& x,
                           Rng* dropout_rng, nn::ParamTree<S>* bn_state) {
  ad::Var<S> h = detail::apply_linear(vars, "head.l1", x);
  const S eps = S(1e-5);
  if (dropout_rng != nullptr) {
    Matrix<S> batch_mean, batch_var;
    h = ad::batch_norm_train(h, vars.at("head.bn.g"), vars.at("head.bn.b"), eps, &batch_mean,
                             &batch_var);
    if (bn_state != nullptr) {
      const S momentum = S(0.9);
      Matrix<S>& rm = bn_state->at("head.bn.running_mean");
      Matrix<S>& rv = bn_state->at("head.bn.running_var");
      rm = momentum * rm + (S(1) - momentum) * batch_mean;
      rv = momentum * rv + (S(1) - momentum) * batch_var;
    }
  } else {
    if (bn_state == nullptr) throw ContractError("projection_head: eval mode needs bn state");
    h = ad::batch_norm_eval(h, vars.at("head.bn.g"), vars.at("head.bn.b"),
                            bn_state->at("head.bn.running_mean"),
                            bn_state->at("head.bn.running_var"), eps);
  }
  h = ad::silu(h);
  h = detail::dropout(tape, h, 0.30, dropout_rng);
  return detail::apply_linear(vars, "head.l2", h);
}

}  // namespace wbm::model
