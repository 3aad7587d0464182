#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "support.hpp"
#include "wbm/errors.hpp"
#include "wbm/evalharness.hpp"

using namespace wbm;

TEST_CASE("subject aggregation identities and concat commutation") {
  io::EmbeddingRecord w1{1, 0, {1.0f, 2.0f}};
  io::EmbeddingRecord w2{1, 1, {-1.0f, -2.0f}};
  io::EmbeddingRecord w3{2, 0, {3.0f, 4.0f}};
  auto agg = eval::subject_aggregate({w1, w2, w3});
  CHECK(agg.at(1)[0] == doctest::Approx(0.0));
  CHECK(agg.at(1)[1] == doctest::Approx(0.0));
  CHECK(agg.at(2)[0] == doctest::Approx(3.0));

  // single week -> that vector; identical weeks -> same vector
  auto single = eval::subject_aggregate({w3});
  CHECK(single.at(2) == std::vector<double>({3.0, 4.0}));
  auto twice = eval::subject_aggregate({w3, io::EmbeddingRecord{2, 1, {3.0f, 4.0f}}});
  CHECK(twice.at(2) == std::vector<double>({3.0, 4.0}));

  // aggregate-then-concat equals concat-then-aggregate
  io::EmbeddingRecord b1{1, 0, {5.0f}};
  io::EmbeddingRecord b2{1, 1, {7.0f}};
  io::EmbeddingRecord b3{2, 0, {9.0f}};
  auto joined = eval::concat_embeddings({w1, w2, w3}, {b1, b2, b3});
  CHECK(joined[0].vector.size() == 3);
  auto agg_concat = eval::subject_aggregate(joined);
  auto agg_a = eval::subject_aggregate({w1, w2, w3});
  auto agg_b = eval::subject_aggregate({b1, b2, b3});
  for (auto subject : {1ull, 2ull}) {
    std::vector<double> expect = agg_a.at(subject);
    expect.insert(expect.end(), agg_b.at(subject).begin(), agg_b.at(subject).end());
    CHECK(agg_concat.at(subject) == expect);
  }

  // misaligned keys -> error
  CHECK_THROWS_AS(eval::concat_embeddings({w1, w2, w3}, {b1, b3}), ContractError);

  // zero-dimensional b leaves a unchanged
  io::EmbeddingRecord e1{1, 0, {}}, e2{1, 1, {}}, e3{2, 0, {}};
  auto padded = eval::concat_embeddings({w1, w2, w3}, {e1, e2, e3});
  CHECK(padded[0].vector == w1.vector);
  CHECK(padded[2].vector == w3.vector);
}

TEST_CASE("baseline features layout") {
  WeekGrid g;
  g.values(0, kHeartRate) = 2.0;
  g.mask(0, kHeartRate) = 1;
  g.values(1, kHeartRate) = 4.0;
  g.mask(1, kHeartRate) = 1;
  auto f = eval::baseline_features(g, std::nullopt);
  REQUIRE(f.size() == 54);
  CHECK(f[kHeartRate] == doctest::Approx(3.0));
  CHECK(f[kNumVariables + kHeartRate] == doctest::Approx(1.0));  // population std
  CHECK(f[kVo2Max] == 0.0);                                      // missing -> (0, 0)
  CHECK(f[kNumVariables + kVo2Max] == 0.0);

  eval::Demographics demo{44.0, 1.0, 27.5};
  auto fd = eval::baseline_features(g, demo);
  REQUIRE(fd.size() == 57);
  CHECK(fd[54] == 44.0);
  CHECK(fd[55] == 1.0);
  CHECK(fd[56] == 27.5);
}

TEST_CASE("ridge recovers exact coefficients and shrinks under huge penalties") {
  Rng rng(1);
  MatrixD x = testing::random_matrix(20, 5, rng);
  VectorD w(5);
  w << 1.5, -2.0, 0.5, 3.0, -1.0;
  VectorD y = x * w;
  y.array() += 0.75;  // intercept

  eval::ProbeSpec spec;
  spec.penalties = {0.0};
  spec.folds = 4;
  auto fit = eval::ridge_fit_cv(x, y, spec);
  CHECK((fit.beta - w).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(fit.intercept == doctest::Approx(0.75).epsilon(1e-8));

  auto shrunk = eval::ridge_fit(x, y, 1e12);
  CHECK(shrunk.beta.norm() < 1e-6);  // intercept-only predictor

  // singular system at penalty 0 -> smallest-norm solution, flagged
  MatrixD sing(6, 4);
  sing.setZero();
  sing.col(0).setOnes();
  sing.col(1) = sing.col(0);  // duplicate column
  VectorD ys = VectorD::Ones(6);
  auto min_norm = eval::ridge_fit(sing, ys, 0.0);
  CHECK(min_norm.used_min_norm);
  CHECK(min_norm.predict(sing).isApprox(ys, 1e-9));
}

TEST_CASE("cross-validation picks a competitive penalty") {
  Rng rng(7);
  MatrixD x = testing::random_matrix(100, 10, rng);
  VectorD w = testing::random_matrix(10, 1, rng);
  VectorD noise = testing::random_matrix(100, 1, rng);
  VectorD y = x * w + 0.5 * noise;

  // held-out oracle slice
  MatrixD x_test = testing::random_matrix(400, 10, rng);
  VectorD y_test = x_test * w + 0.5 * testing::random_matrix(400, 1, rng);

  eval::ProbeSpec spec;
  spec.penalties = {1e-4, 1e-2, 1.0, 1e2, 1e4};
  spec.folds = 5;
  spec.seed = 3;
  auto cv = eval::ridge_fit_cv(x, y, spec);
  auto lo = eval::ridge_fit(x, y, spec.penalties.front());
  auto hi = eval::ridge_fit(x, y, spec.penalties.back());
  auto mse = [&](const eval::RidgeFit& f) {
    return (f.predict(x_test) - y_test).squaredNorm() / static_cast<double>(y_test.size());
  };
  CHECK(mse(cv) <= mse(lo) + 1e-12);
  CHECK(mse(cv) <= mse(hi) + 1e-12);

  // predictions vary continuously in the penalty
  auto p1 = eval::ridge_fit(x, y, 1.0).predict(x_test);
  auto p2 = eval::ridge_fit(x, y, 1.0 + 1e-9).predict(x_test);
  CHECK((p1 - p2).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("metric identities") {
  VectorD y(4);
  y << 1.0, 2.0, 3.0, 4.0;
  CHECK(eval::metric_mae(y, y) == 0.0);
  CHECK(eval::metric_r2(y, y) == 1.0);
  VectorD constant = VectorD::Constant(4, y.mean());
  CHECK(eval::metric_r2(constant, y) == doctest::Approx(0.0));

  // the worked AUROC example: positives {0.9}, negatives {0.8, 0.3}
  VectorD scores(3);
  scores << 0.9, 0.8, 0.3;
  CHECK(eval::metric_auroc(scores, {1, 0, 0}) == doctest::Approx(1.0));

  // perfect separation and invariance under a strictly increasing transform
  Rng rng(5);
  VectorD s = testing::random_matrix(50, 1, rng);
  std::vector<int> labels(50);
  for (int i = 0; i < 50; ++i) labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.4);
  double base = eval::metric_auroc(s, labels);
  VectorD transformed = (3.0 * s).array().exp() + 2.0;
  CHECK(eval::metric_auroc(transformed, labels) == doctest::Approx(base).epsilon(1e-12));

  CHECK_THROWS_AS(eval::metric_auroc(scores, {1, 1, 1}), ContractError);
}

TEST_CASE("auroc matches brute-force pair counting with ties") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 5 + static_cast<int>(rng.below(40));
    VectorD scores(n);
    std::vector<int> labels(static_cast<std::size_t>(n));
    bool pos = false, neg = false;
    for (int i = 0; i < n; ++i) {
      // Small discrete support creates plenty of ties.
      scores(i) = static_cast<double>(rng.below(6)) / 2.0;
      labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.5);
      (labels[static_cast<std::size_t>(i)] ? pos : neg) = true;
    }
    if (!pos || !neg) continue;
    double wins = 0.0;
    std::int64_t pairs = 0;
    for (int i = 0; i < n; ++i) {
      if (!labels[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < n; ++j) {
        if (labels[static_cast<std::size_t>(j)]) continue;
        ++pairs;
        if (scores(i) > scores(j)) {
          wins += 1.0;
        } else if (scores(i) == scores(j)) {
          wins += 0.5;
        }
      }
    }
    double brute = wins / static_cast<double>(pairs);
    CHECK(eval::metric_auroc(scores, labels) == doctest::Approx(brute).epsilon(1e-12));
  }
}

TEST_CASE("bootstrap intervals: degenerate, deterministic, ordered") {
  auto constant_metric = [](const std::vector<int>&) { return 4.25; };
  auto ci = eval::bootstrap_ci(constant_metric, 30, nullptr, 200, 9);
  CHECK(ci.lo == 4.25);
  CHECK(ci.hi == 4.25);

  Rng rng(3);
  VectorD values = testing::random_matrix(40, 1, rng);
  auto mean_metric = [&](const std::vector<int>& rows) {
    double s = 0.0;
    for (int r : rows) s += values(r);
    return s / static_cast<double>(rows.size());
  };
  auto a = eval::bootstrap_ci(mean_metric, 40, nullptr, 500, 17);
  auto b = eval::bootstrap_ci(mean_metric, 40, nullptr, 500, 17);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  CHECK(a.lo <= a.hi);

  // resamples that throw are skipped and counted
  int calls = 0;
  auto sometimes = [&](const std::vector<int>& rows) -> double {
    ++calls;
    if (rows.front() % 3 == 0) throw ContractError("single class");
    return 1.0;
  };
  auto skipped = eval::bootstrap_ci(sometimes, 10, nullptr, 300, 5);
  CHECK(skipped.skipped > 0);
  CHECK(skipped.lo == 1.0);
}

TEST_CASE("probe leakage assertion trips on corrupted splits") {
  Rng rng(21);
  eval::ProbeData train, test;
  train.x = testing::random_matrix(20, 3, rng);
  train.y = testing::random_matrix(20, 1, rng);
  for (std::uint64_t i = 0; i < 20; ++i) train.subject.push_back(i);
  test.x = testing::random_matrix(8, 3, rng);
  test.y = testing::random_matrix(8, 1, rng);
  for (std::uint64_t i = 100; i < 108; ++i) test.subject.push_back(i);

  eval::ProbeSpec spec;
  spec.task = eval::ProbeSpec::Task::Regression;
  spec.penalties = {1.0};
  spec.resamples = 100;
  CHECK_NOTHROW(eval::run_probe(train, test, spec, "clean"));

  test.subject[3] = 5;  // deliberately corrupt: subject 5 is in train
  CHECK_THROWS_AS(eval::run_probe(train, test, spec, "corrupt"), ContractError);
}

TEST_CASE("weekly mean reconstruction probe finds planted coordinates") {
  // 24 subjects x 4 weeks; variable 3 observed everywhere, variable 21 never.
  Rng rng(33);
  std::vector<WeekGrid> grids;
  std::vector<io::EmbeddingRecord> embeddings;
  std::vector<std::uint64_t> ids;
  for (std::uint64_t s = 1; s <= 24; ++s) {
    ids.push_back(s);
    for (int w = 0; w < 4; ++w) {
      WeekGrid g;
      g.subject_id = s;
      g.week_index = w;
      for (int t = 0; t < 10; ++t) {
        g.values(t * 7, 3) = rng.normal(5.0, 2.0);
        g.mask(t * 7, 3) = 1;
      }
      double mean = 0.0;
      for (int t = 0; t < 10; ++t) mean += g.values(t * 7, 3) / 10.0;
      io::EmbeddingRecord rec;
      rec.subject_id = s;
      rec.week_index = w;
      rec.vector = {static_cast<float>(mean), static_cast<float>(rng.normal(0, 1)),
                    static_cast<float>(rng.normal(0, 1)), static_cast<float>(rng.normal(0, 1))};
      embeddings.push_back(rec);
      grids.push_back(std::move(g));
    }
  }
  auto splits = pipeline::split_subjects(ids, 4);
  eval::ProbeSpec spec;
  spec.folds = 3;
  spec.resamples = 100;
  auto table = eval::weekly_mean_reconstruction_probe(embeddings, grids, splits, spec);
  REQUIRE(table.size() == kNumVariables);
  CHECK_FALSE(table[3].skipped);
  CHECK(table[3].r2 >= 0.999);  // the mean is literally embedding coordinate 0
  CHECK(table[21].skipped);     // never observed -> bookkeeping says skipped

  // random embeddings carry no information about the mean
  for (auto& rec : embeddings) {
    rec.vector = {static_cast<float>(rng.normal(0, 1)), static_cast<float>(rng.normal(0, 1)),
                  static_cast<float>(rng.normal(0, 1)), static_cast<float>(rng.normal(0, 1))};
  }
  auto null_table = eval::weekly_mean_reconstruction_probe(embeddings, grids, splits, spec);
  CHECK(null_table[3].r2 < 0.25);
}

TEST_CASE("extract embeddings is deterministic and validates the checkpoint" *
          doctest::timeout(300)) {
  auto gen = testing::dense_cohort_config(12, 6, 5);
  auto cohort = synthgen::generate_cohort(gen);
  auto agg = pipeline::aggregate_hourly(cohort.measurements);
  auto grids = pipeline::apply_filters(pipeline::build_week_grids(agg.hourly), {});
  REQUIRE(grids.size() > 10);

  model::ModelConfig mcfg;
  mcfg.tokenizer = model::TokenizerKind::Tuple;
  mcfg.backbone = model::BackboneKind::RotaryAttention;
  mcfg.dim = 8;
  mcfg.layers = 1;
  mcfg.heads = 2;
  mcfg.dropout = 0.5;  // must not matter at inference
  checkpoint::Checkpoint ckpt;
  ckpt.config = mcfg;
  ckpt.params = model::init_encoder_params<float>(mcfg, 3);
  {
    auto head = model::init_projection_params<float>(mcfg.dim, 3);
    for (auto& [name, tensor] : head.tensors) ckpt.params.add(name, std::move(tensor));
  }
  std::vector<WeekGrid> train(grids.begin(), grids.begin() + 6);
  ckpt.stats = pipeline::fit_norm_stats(train);

  auto a = eval::extract_embeddings(ckpt, grids, 1);
  auto b = eval::extract_embeddings(ckpt, grids, 3);  // thread count must not matter
  REQUIRE(a.size() == grids.size());
  CHECK(io::embeddings_to_bytes(a, mcfg.dim) == io::embeddings_to_bytes(b, mcfg.dim));
  CHECK(a[0].vector.size() == 8);

  // same week twice -> identical vectors
  std::vector<WeekGrid> twice = {grids[0], grids[0]};
  auto dup = eval::extract_embeddings(ckpt, twice, 1);
  CHECK(dup[0].vector == dup[1].vector);

  // a week with a single observed tuple still embeds finitely
  WeekGrid lonely;
  lonely.subject_id = 999;
  lonely.week_index = 0;
  lonely.values(80, kHeartRate) = 66.0;
  lonely.mask(80, kHeartRate) = 1;
  auto one = eval::extract_embeddings(ckpt, {lonely}, 1);
  for (float v : one[0].vector) CHECK(std::isfinite(v));

  // checkpoint/model mismatch -> contract error
  checkpoint::Checkpoint bad = ckpt;
  bad.config.dim = 16;
  CHECK_THROWS_AS(eval::extract_embeddings(bad, grids, 1), ContractError);
}

TEST_CASE("ablation grid: single cell and ranking" * doctest::timeout(600)) {
  auto gen = testing::dense_cohort_config(24, 6, 44);
  auto cohort = synthgen::generate_cohort(gen);
  auto data = pretrain::prepare_dataset(cohort.measurements, {}, 4.0, 44);

  eval::AblationConfig ac;
  ac.tokenizers = {model::TokenizerKind::Tst};
  ac.backbones = {model::BackboneKind::BiMamba2};
  ac.base.model.dim = 8;
  ac.base.model.layers = 2;
  ac.base.model.heads = 2;
  ac.base.model.dropout = 0.0;
  ac.base.model.mamba.head_dim = 8;
  ac.base.model.mamba.state_dim = 4;
  ac.base.batch_pairs = 4;
  ac.base.epochs = 1;
  ac.base.seed = 2;
  ac.base.optim.warmup_steps = 4;
  ac.probe.resamples = 100;
  ac.probe.folds = 3;
  ac.probe.penalties = {1.0, 100.0};

  auto cells = eval::run_ablation_grid(data, cohort.labels, ac);
  REQUIRE(cells.size() == 1);
  CHECK_FALSE(cells[0].failed);
  CHECK(cells[0].val_age_mae > 0.0);

  ac.backbones = {model::BackboneKind::BiMamba2, model::BackboneKind::RotaryAttention};
  auto two = eval::run_ablation_grid(data, cohort.labels, ac);
  REQUIRE(two.size() == 2);
  CHECK_FALSE(two[0].failed);
  CHECK_FALSE(two[1].failed);
  CHECK(two[0].val_age_mae <= two[1].val_age_mae);  // ranked ascending
  std::string csv = eval::ablation_to_csv(two);
  CHECK(csv.find("rank,tokenizer,backbone,status,val_age_mae") == 0);
}
