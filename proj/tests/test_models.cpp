#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"
#include "wbm/checkpoint.hpp"
#include "wbm/errors.hpp"
#include "wbm/model.hpp"
#include "wbm/pretrain.hpp"

using namespace wbm;
using ad::Var;

namespace {

// Tiny configs keep gradchecks and property tests fast.
model::ModelConfig tiny_config(model::TokenizerKind tok, model::BackboneKind bb) {
  model::ModelConfig cfg;
  cfg.tokenizer = tok;
  cfg.backbone = bb;
  cfg.dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.dropout = 0.0;
  cfg.tst_hidden_mult = 2;
  cfg.mtan_time_dim = 4;
  cfg.tuple_value_hidden = 4;
  cfg.mamba.state_dim = 4;
  cfg.mamba.head_dim = 4;
  cfg.mamba.conv_width = 4;
  cfg.mamba.chunk = 8;
  cfg.mamba.expand = 2;
  return cfg;
}

WeekGrid sparse_grid(std::uint64_t seed, int observed) {
  Rng rng(seed);
  WeekGrid g;
  g.subject_id = 1;
  int placed = 0;
  while (placed < observed) {
    int t = static_cast<int>(rng.below(kHoursPerWeek));
    int v = static_cast<int>(rng.below(kNumVariables));
    if (!g.mask(t, v)) {
      g.mask(t, v) = 1;
      g.values(t, v) = rng.normal(0.0, 1.0);
      ++placed;
    }
  }
  return g;
}

template <typename S>
Matrix<S> encode_grid(const model::ModelConfig& cfg, const nn::ParamTree<S>& params,
                      const WeekGrid& grid) {
  ad::Tape<S> tape;
  nn::VarMap<S> vars = nn::upload(tape, params, false);
  model::EncodeContext<S> ctx;
  auto tokens = model::tokenize(tape, vars, cfg, grid, ctx);
  auto out = model::encode_tokens(tape, vars, cfg, tokens, nullptr);
  return out.val();
}

}  // namespace

TEST_CASE("tst tokenizer emits 168 tokens with row locality") {
  auto cfg = tiny_config(model::TokenizerKind::Tst, model::BackboneKind::BiMamba2);
  auto params = model::init_encoder_params<double>(cfg, 3);

  WeekGrid a = sparse_grid(5, 60);
  WeekGrid b = a;
  // change hour 7 only
  b.values(7, 2) += 1.0;
  b.mask(7, 2) = 1;
  a.mask(7, 2) = 1;

  ad::Tape<double> tape;
  auto vars = nn::upload(tape, params, false);
  model::EncodeContext<double> ctx;
  auto ta = model::tokenize(tape, vars, cfg, a, ctx);
  auto tb = model::tokenize(tape, vars, cfg, b, ctx);
  CHECK(ta.seq.rows() == 168);
  CHECK(ta.seq.cols() == cfg.dim);
  REQUIRE(ta.positions.size() == 168);
  CHECK(ta.positions[167] == 167);
  for (int t = 0; t < 168; ++t) {
    double diff = (ta.seq.val().row(t) - tb.seq.val().row(t)).cwiseAbs().maxCoeff();
    if (t == 7) {
      CHECK(diff > 0.0);
    } else {
      CHECK(diff == 0.0);
    }
  }

  // zero input with zero biases gives exactly zero tokens
  WeekGrid zero;
  auto tz = model::tokenize(tape, vars, cfg, zero, ctx);
  CHECK(tz.seq.val().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mtan tokenizer interpolates observed values and zeroes empty variables") {
  auto cfg = tiny_config(model::TokenizerKind::Mtan, model::BackboneKind::RotaryAttention);
  auto params = model::init_encoder_params<double>(cfg, 11);
  // Projection picks channel 3 into output coordinate 0.
  params.at("tok.proj.w").setZero();
  params.at("tok.proj.w")(3, 0) = 1.0;
  params.at("tok.proj.b").setZero();

  WeekGrid g;
  g.subject_id = 1;
  g.values(50, 3) = 2.5;  // single observation of variable 3
  g.mask(50, 3) = 1;

  ad::Tape<double> tape;
  auto vars = nn::upload(tape, params, false);
  model::EncodeContext<double> ctx;
  auto tokens = model::tokenize(tape, vars, cfg, g, ctx);
  CHECK(tokens.seq.rows() == 168);
  // softmax over a single key puts weight 1 on it at every query hour
  for (int t = 0; t < 168; ++t) {
    CHECK(tokens.seq.val()(t, 0) == doctest::Approx(2.5).epsilon(1e-9));
  }

  // a fully unobserved variable contributes a zero channel
  params.at("tok.proj.w").setZero();
  params.at("tok.proj.w")(7, 0) = 1.0;  // variable 7 never observed in g
  ad::Tape<double> tape2;
  auto vars2 = nn::upload(tape2, params, false);
  model::EncodeContext<double> ctx2;
  auto tokens2 = model::tokenize(tape2, vars2, cfg, g, ctx2);
  CHECK(tokens2.seq.val().col(0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("masked attention rows sum to one over observed keys") {
  Rng rng(4);
  ad::Tape<double> tape;
  auto logits = tape.constant(testing::random_matrix(10, 10, rng));
  Matrix<double> keep = Matrix<double>::Zero(10, 10);
  for (Eigen::Index j = 0; j < 10; ++j) {
    bool obs = rng.bernoulli(0.5);
    keep.col(j).setConstant(obs ? 1.0 : 0.0);
  }
  auto attn = ad::softmax_rows_masked(logits, keep);
  bool any = keep.row(0).sum() > 0;
  for (Eigen::Index i = 0; i < 10; ++i) {
    double row_sum = attn.val().row(i).sum();
    CHECK(row_sum == doctest::Approx(any ? 1.0 : 0.0).epsilon(1e-9));
  }
  // against a dense softmax with -inf at masked keys
  for (Eigen::Index i = 0; i < 10 && any; ++i) {
    Eigen::VectorXd dense(10);
    for (Eigen::Index j = 0; j < 10; ++j) {
      dense(j) = keep(i, j) != 0.0 ? logits.val()(i, j) : -std::numeric_limits<double>::infinity();
    }
    double mx = dense.maxCoeff();
    Eigen::VectorXd ex = (dense.array() - mx).exp();
    ex /= ex.sum();
    for (Eigen::Index j = 0; j < 10; ++j) {
      CHECK(attn.val()(i, j) == doctest::Approx(ex(j)).epsilon(1e-9));
    }
  }
}

TEST_CASE("tuple tokenizer produces one token per observation") {
  auto cfg = tiny_config(model::TokenizerKind::Tuple, model::BackboneKind::BiMamba2);
  auto params = model::init_encoder_params<double>(cfg, 13);

  WeekGrid g;
  g.subject_id = 1;
  g.values(10, 4) = 1.5;
  g.mask(10, 4) = 1;
  g.values(100, 4) = 1.5;
  g.mask(100, 4) = 1;
  g.values(10, 9) = -0.5;
  g.mask(10, 9) = 1;

  ad::Tape<double> tape;
  auto vars = nn::upload(tape, params, false);
  model::EncodeContext<double> ctx;
  auto tokens = model::tokenize(tape, vars, cfg, g, ctx);
  REQUIRE(tokens.seq.rows() == 3);
  CHECK(tokens.positions == std::vector<int>({10, 10, 100}));
  CHECK(tokens.variable_ids == std::vector<int>({4, 9, 4}));
  // same (variable, value) at different hours -> identical tokens (time off for mamba)
  CHECK_FALSE(cfg.tuple_add_time());
  CHECK((tokens.seq.val().row(0) - tokens.seq.val().row(2)).cwiseAbs().maxCoeff() == 0.0);

  // phi_x with zero bias at x = 0 contributes nothing: token = variable row
  params.at("tok.val1.b").setZero();
  params.at("tok.val2.b").setZero();
  WeekGrid z;
  z.values(5, 7) = 0.0;
  z.mask(5, 7) = 1;
  ad::Tape<double> tape2;
  auto vars2 = nn::upload(tape2, params, false);
  model::EncodeContext<double> ctx2;
  auto t2 = model::tokenize(tape2, vars2, cfg, z, ctx2);
  CHECK((t2.seq.val().row(0).transpose() -
         params.at("tok.var_table").row(7).transpose())
            .cwiseAbs()
            .maxCoeff() < 1e-12);

  // empty stream -> invalid sequence, encode refuses it
  WeekGrid empty;
  ad::Tape<double> tape3;
  auto vars3 = nn::upload(tape3, params, false);
  model::EncodeContext<double> ctx3;
  auto t3 = model::tokenize(tape3, vars3, cfg, empty, ctx3);
  CHECK_FALSE(t3.seq.valid());
  CHECK_THROWS_AS(model::encode_tokens(tape3, vars3, cfg, t3, nullptr), ContractError);
}

TEST_CASE("learned position encoder: zero layers is an identity stack") {
  auto cfg = tiny_config(model::TokenizerKind::Tuple, model::BackboneKind::LearnedPosAttention);
  cfg.layers = 0;
  auto params = model::init_encoder_params<double>(cfg, 21);
  WeekGrid g = sparse_grid(8, 10);

  ad::Tape<double> tape;
  auto vars = nn::upload(tape, params, false);
  model::EncodeContext<double> ctx;
  auto tokens = model::tokenize(tape, vars, cfg, g, ctx);
  auto out = model::encode_tokens(tape, vars, cfg, tokens, nullptr);
  Matrix<double> expected = tokens.seq.val();
  for (Eigen::Index i = 0; i < expected.rows(); ++i) {
    expected.row(i) += params.at("enc.pos_table").row(tokens.positions[static_cast<std::size_t>(i)]);
  }
  CHECK((out.val() - expected).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("self-attention with per-token positions is permutation equivariant") {
  auto cfg = tiny_config(model::TokenizerKind::Tuple, model::BackboneKind::LearnedPosAttention);
  auto params = model::init_encoder_params<double>(cfg, 33);
  Rng rng(2);
  Matrix<double> toks = testing::random_matrix(6, cfg.dim, rng);
  std::vector<int> pos = {3, 77, 12, 160, 45, 3};
  std::vector<int> perm = {4, 0, 5, 2, 1, 3};

  auto encode = [&](const Matrix<double>& t, const std::vector<int>& p) {
    ad::Tape<double> tape;
    auto vars = nn::upload(tape, params, false);
    model::WeekTokens<double> wt;
    wt.seq = tape.constant(t);
    wt.positions = p;
    return model::encode_tokens(tape, vars, cfg, wt, nullptr).val();
  };
  Matrix<double> base = encode(toks, pos);
  Matrix<double> pt(6, cfg.dim);
  std::vector<int> pp(6);
  for (int i = 0; i < 6; ++i) {
    pt.row(i) = toks.row(perm[static_cast<std::size_t>(i)]);
    pp[static_cast<std::size_t>(i)] = pos[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  Matrix<double> permuted = encode(pt, pp);
  for (int i = 0; i < 6; ++i) {
    CHECK((permuted.row(i) - base.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() <
          1e-12);
  }
}

TEST_CASE("rotary rotation preserves norms and depends only on offsets") {
  Rng rng(10);
  MatrixD q = testing::random_matrix(1, 8, rng);
  MatrixD k = testing::random_matrix(1, 8, rng);

  // norm preservation
  for (int i : {0, 5, 100, 167}) {
    MatrixD r = model::rope_rotate(q, {i});
    CHECK(r.norm() == doctest::Approx(q.norm()).epsilon(1e-9));
  }
  // offset invariance: <rot(q, i), rot(k, i + delta)> constant over i
  for (int delta : {0, 1, 7, 40}) {
    double ref = 0.0;
    for (int i = 0; i <= 100; ++i) {
      double dot = (model::rope_rotate(q, {i}).row(0) *
                    model::rope_rotate(k, {i + delta}).row(0).transpose())(0, 0);
      if (i == 0) {
        ref = dot;
      } else {
        CHECK(dot == doctest::Approx(ref).epsilon(1e-6));
      }
    }
    if (delta == 0) {
      CHECK(ref == doctest::Approx((q.row(0) * k.row(0).transpose())(0, 0)).epsilon(1e-9));
    }
  }
}

TEST_CASE("bimamba2 reversal property and output shapes") {
  auto cfg = tiny_config(model::TokenizerKind::Tst, model::BackboneKind::BiMamba2);
  auto params = model::init_encoder_params<double>(cfg, 55);
  Rng rng(3);
  Matrix<double> x = testing::random_matrix(12, cfg.dim, rng);

  ad::Tape<double> tape;
  auto vars = nn::upload(tape, params, false);
  auto xin = tape.constant(x);
  const int half = cfg.layers / 2;

  // stacks run independently per direction
  auto fwd = model::mamba_stack(tape, vars, cfg, "enc.f", half, xin, nullptr);
  auto bwd = model::mamba_stack(tape, vars, cfg, "enc.b", half, ad::reverse_rows(xin), nullptr);

  // backward-half identity: reverse(forward-run of reversed input on the
  // backward stack) is exactly what the encoder concatenates.
  auto bwd_re = ad::reverse_rows(bwd);
  auto rerun = model::mamba_stack(tape, vars, cfg, "enc.b", half, ad::reverse_rows(xin), nullptr);
  CHECK((bwd_re.val() - ad::reverse_rows(rerun).val()).cwiseAbs().maxCoeff() == 0.0);

  // swapped-stack property: reversing input and swapping f/b yields the
  // reversed concatenation with halves swapped.
  nn::ParamTree<double> swapped;
  for (const auto& [name, tensor] : params.tensors) {
    std::string swapped_name = name;
    if (name.rfind("enc.f", 0) == 0) {
      swapped_name = "enc.b" + name.substr(5);
    } else if (name.rfind("enc.b", 0) == 0) {
      swapped_name = "enc.f" + name.substr(5);
    }
    swapped.add(swapped_name, tensor);
  }
  ad::Tape<double> tape2;
  auto vars2 = nn::upload(tape2, swapped, false);
  auto xrev = tape2.constant(x.colwise().reverse().eval());
  auto fwd2 = model::mamba_stack(tape2, vars2, cfg, "enc.f", half, xrev, nullptr);
  auto bwd2 = model::mamba_stack(tape2, vars2, cfg, "enc.b", half, ad::reverse_rows(xrev), nullptr);
  // fwd2 run on reversed input with the original backward stack == reverse(bwd)
  CHECK((fwd2.val() - bwd.val()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((ad::reverse_rows(bwd2).val().colwise().reverse() - fwd.val()).cwiseAbs().maxCoeff() <
        1e-12);

  // full encoder output shape and determinism with dropout off
  WeekGrid g = sparse_grid(77, 64);
  auto a = encode_grid(cfg, params, g);
  auto b = encode_grid(cfg, params, g);
  CHECK(a.rows() == 168);
  CHECK(a.cols() == cfg.dim);
  CHECK(a == b);
}

TEST_CASE("degenerate recurrence: decay one and zero injection hold state") {
  ad::Tape<double> tape;
  const Eigen::Index L = 10, P = 2, N = 3;
  Matrix<double> decay = Matrix<double>::Ones(L, 1);
  Matrix<double> x = Matrix<double>::Zero(L, P);
  x(0, 0) = 1.0;
  x(0, 1) = -2.0;
  Rng rng(6);
  Matrix<double> b = Matrix<double>::Zero(L, N);
  b.row(0) = testing::random_matrix(1, N, rng);
  Matrix<double> c = testing::random_matrix(L, N, rng);
  auto y = ad::ssd_scan(tape.constant(decay), tape.constant(x), tape.constant(b), tape.constant(c), 4);
  // state after t=0 never changes; outputs are state * c_t
  Matrix<double> h = x.row(0).transpose() * b.row(0);
  for (Eigen::Index t = 0; t < L; ++t) {
    Matrix<double> expect = (h * c.row(t).transpose()).transpose();
    CHECK((y.val().row(t) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("positions outside the week are a contract error") {
  auto cfg = tiny_config(model::TokenizerKind::Tuple, model::BackboneKind::LearnedPosAttention);
  auto params = model::init_encoder_params<double>(cfg, 3);
  ad::Tape<double> tape;
  auto vars = nn::upload(tape, params, false);
  Rng rng(1);
  model::WeekTokens<double> wt;
  wt.seq = tape.constant(testing::random_matrix(2, cfg.dim, rng));
  wt.positions = {5, 200};
  CHECK_THROWS_AS(model::encode_tokens(tape, vars, cfg, wt, nullptr), ContractError);
}

TEST_CASE("pool mean identities") {
  ad::Tape<double> tape;
  Rng rng(8);
  Matrix<double> u = testing::random_matrix(1, 6, rng);
  auto single = model::pool_mean(tape.constant(u));
  CHECK((single.val() - u).cwiseAbs().maxCoeff() == 0.0);

  Matrix<double> pm(2, 6);
  pm.row(0) = u;
  pm.row(1) = -u;
  CHECK(model::pool_mean(tape.constant(pm)).val().cwiseAbs().maxCoeff() == 0.0);

  Matrix<double> c = Matrix<double>::Constant(5, 6, 3.25);
  CHECK((model::pool_mean(tape.constant(c)).val().array() - 3.25).abs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(model::pool_mean(ad::Var<double>{}), ContractError);
}

TEST_CASE("encoder gradients pass finite differences for all three backbones") {
  Rng rng(40);
  WeekGrid g = sparse_grid(123, 9);  // 9 observations -> tuple length 9
  for (auto bb : {model::BackboneKind::LearnedPosAttention, model::BackboneKind::RotaryAttention,
                  model::BackboneKind::BiMamba2}) {
    auto cfg = tiny_config(model::TokenizerKind::Tuple, bb);
    cfg.layers = 2;
    auto params = model::init_encoder_params<double>(cfg, 71);
    Matrix<double> w = testing::random_matrix(9, cfg.dim, rng);
    auto build = [&](ad::Tape<double>& tape, const nn::VarMap<double>& vars) {
      model::EncodeContext<double> ctx;
      auto tokens = model::tokenize(tape, vars, cfg, g, ctx);
      auto out = model::encode_tokens(tape, vars, cfg, tokens, nullptr);
      return ad::sum(out * tape.constant(w));
    };
    std::string worst;
    double err = testing::gradcheck(build, params, 1e-5, &worst);
    INFO("backbone ", model::backbone_name(bb), " worst tensor: ", worst);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("projection head train/eval modes and gradients") {
  const int dim = 6;
  auto params = model::init_projection_params<double>(dim, 5);
  nn::ParamTree<double> bn_state;
  bn_state.add("head.bn.running_mean", Matrix<double>::Zero(1, 4 * dim));
  bn_state.add("head.bn.running_var", Matrix<double>::Ones(1, 4 * dim));

  Rng rng(9);
  Matrix<double> x = testing::random_matrix(7, dim, rng);
  Matrix<double> w = testing::random_matrix(7, dim, rng);

  nn::ParamTree<double> all = params;
  auto build = [&](ad::Tape<double>& tape, const nn::VarMap<double>& vars) {
    Rng drop(3);  // fixed dropout stream keeps the loss a pure function
    auto h = model::projection_head(tape, vars, tape.constant(x), &drop,
                                    static_cast<nn::ParamTree<double>*>(nullptr));
    return ad::sum(h * tape.constant(w));
  };
  std::string worst;
  double err = testing::gradcheck(build, all, 1e-5, &worst);
  INFO("worst tensor: ", worst);
  CHECK(err < 1e-4);

  // eval mode uses frozen running stats and is deterministic
  ad::Tape<double> tape;
  auto vars = nn::upload(tape, params, false);
  auto h1 = model::projection_head(tape, vars, tape.constant(x), nullptr, &bn_state);
  auto h2 = model::projection_head(tape, vars, tape.constant(x), nullptr, &bn_state);
  CHECK((h1.val() - h2.val()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(h1.val().cols() == dim);
}

TEST_CASE("checkpoint round trip preserves everything") {
  auto cfg = tiny_config(model::TokenizerKind::Tst, model::BackboneKind::BiMamba2);
  checkpoint::Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.params = model::init_encoder_params<float>(cfg, 17);
  ckpt.state.add("head.bn.running_mean", MatrixF::Constant(1, 4, 0.5f));
  ckpt.stats.mean[3] = 42.0;
  ckpt.stats.stddev[3] = 7.0;
  ckpt.stats.observed_in_train[3] = true;

  std::string bytes = checkpoint::to_bytes(ckpt);
  auto back = checkpoint::from_bytes(bytes);
  CHECK(checkpoint::to_bytes(back) == bytes);
  CHECK(back.config.dim == cfg.dim);
  CHECK(back.stats.mean[3] == 42.0);
  checkpoint::check_params_match(ckpt.params, back.params);

  // corrupt one byte -> checksum failure
  std::string bad = bytes;
  bad[bytes.size() / 2] = static_cast<char>(bad[bytes.size() / 2] ^ 0x40);
  CHECK_THROWS_AS(checkpoint::from_bytes(bad), IoError);

  // shape mismatch rejected
  auto other = model::init_encoder_params<float>(tiny_config(model::TokenizerKind::Mtan,
                                                             model::BackboneKind::BiMamba2),
                                                 17);
  CHECK_THROWS_AS(checkpoint::check_params_match(other, back.params), ContractError);
}
