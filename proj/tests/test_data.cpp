#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "wbm/errors.hpp"
#include "wbm/io.hpp"
#include "wbm/pipeline.hpp"
#include "wbm/rng.hpp"
#include "wbm/synthgen.hpp"

using namespace wbm;

TEST_CASE("rng substreams are order independent") {
  Rng root(42);
  Rng a1 = root.fork(7, 3);
  Rng b = root.fork(8, 1);
  (void)b.next_u64();
  Rng a2 = root.fork(7, 3);
  CHECK(a1.next_u64() == a2.next_u64());
}

TEST_CASE("rng uniform range and bernoulli sanity") {
  Rng rng(1);
  int hits = 0;
  for (int i = 0; i < 20000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    if (u < 0.25) ++hits;
  }
  CHECK(hits > 4500);
  CHECK(hits < 5500);
}

TEST_CASE("measurement csv round trip") {
  std::vector<MeasurementTuple> rows = {
      {1, 0, kHeartRate, 72.5},
      {1, 167, kStepCountWatch, 431},
      {2, 168, kWristTemperature, -0.125},
  };
  std::string csv = io::measurements_to_csv(rows);
  auto back = io::measurements_from_csv(csv);
  CHECK(back == rows);
  CHECK(io::measurements_to_csv(back) == csv);
}

TEST_CASE("grid and embedding binaries round trip byte identically") {
  WeekGrid g;
  g.subject_id = 9;
  g.week_index = 3;
  g.values(0, 0) = 1.5;
  g.mask(0, 0) = 1;
  g.values(167, 26) = -2.25;
  g.mask(167, 26) = 1;
  std::string bytes = io::grids_to_bytes({g});
  auto grids = io::grids_from_bytes(bytes);
  REQUIRE(grids.size() == 1);
  CHECK(io::grids_to_bytes(grids) == bytes);

  io::EmbeddingRecord rec{5, 2, {1.0f, -0.5f, 0.25f}};
  std::string ebytes = io::embeddings_to_bytes({rec}, 3);
  int dim = 0;
  auto recs = io::embeddings_from_bytes(ebytes, &dim);
  CHECK(dim == 3);
  REQUIRE(recs.size() == 1);
  CHECK(io::embeddings_to_bytes(recs, dim) == ebytes);
}

TEST_CASE("generator rejects empty configs") {
  auto cfg = synthgen::GeneratorConfig::defaults(0, 8, 1);
  CHECK_THROWS_AS(synthgen::generate_cohort(cfg), ConfigError);
  cfg = synthgen::GeneratorConfig::defaults(3, 4, 1);
  CHECK_THROWS_AS(synthgen::generate_cohort(cfg), ConfigError);
  cfg = synthgen::GeneratorConfig::defaults(3, 8, 1);
  cfg.weekly_rates[0] = 1.5;
  CHECK_THROWS_AS(synthgen::generate_cohort(cfg), ConfigError);
}

TEST_CASE("generator is deterministic under seed") {
  auto cfg = synthgen::GeneratorConfig::defaults(5, 6, 77);
  auto a = synthgen::generate_cohort(cfg);
  auto b = synthgen::generate_cohort(cfg);
  CHECK(a.measurements == b.measurements);
  CHECK(io::measurements_to_csv(a.measurements) == io::measurements_to_csv(b.measurements));
  auto cfg2 = cfg;
  cfg2.rng_seed = 78;
  auto c = synthgen::generate_cohort(cfg2);
  CHECK(a.measurements != c.measurements);
}

TEST_CASE("generated week indices respect span and events are generated weeks") {
  auto cfg = synthgen::GeneratorConfig::defaults(40, 8, 5);
  auto cohort = synthgen::generate_cohort(cfg);
  for (const auto& s : cohort.latents) {
    REQUIRE(s.week_indices.size() == 8);
    CHECK(s.week_indices.front() == 0);
    CHECK(s.week_indices.back() == cfg.effective_span() - 1);
    for (auto w : s.event_weeks) {
      CHECK(std::binary_search(s.week_indices.begin(), s.week_indices.end(), w));
    }
    CHECK(s.age >= 18.0);
    CHECK(s.age <= 90.0);
    CHECK(std::abs(s.fitness) <= 2.0);
    CHECK(std::abs(s.activity_level) <= 2.0);
  }
}

TEST_CASE("weekly observation rates track configured rates" * doctest::timeout(120)) {
  // >= 10k subject-weeks; wrist temperature's 0.0312 is the paper-anchored
  // check, the others cover each sampling class.
  auto cfg = synthgen::GeneratorConfig::defaults(1400, 8, 11);
  auto cohort = synthgen::generate_cohort(cfg);
  std::set<std::tuple<std::uint64_t, std::int64_t, int>> seen;
  for (const auto& m : cohort.measurements) {
    seen.insert({m.subject_id, week_of_hour(m.absolute_hour), m.variable_id});
  }
  double weeks = 1400.0 * 8.0;
  REQUIRE(weeks >= 10000);
  for (int var : {kWristTemperature, kHeartRate, kWalkingSteadiness, kVo2Max, kRestingHeartRate}) {
    std::int64_t n = 0;
    for (const auto& [s, w, v] : seen) {
      if (v == var) ++n;
    }
    double empirical = static_cast<double>(n) / weeks;
    CHECK(std::abs(empirical - cfg.weekly_rates[static_cast<std::size_t>(var)]) < 0.01);
  }
}

TEST_CASE("planted effect oracle recovers configured coefficients") {
  auto cfg = synthgen::GeneratorConfig::defaults(160, 8, 3);
  // Dense observations keep oracle noise small.
  cfg.draw_rate_override[kRestingHeartRate] = 0.95;
  cfg.draw_rate_override[kStepCountWatch] = 0.30;
  auto cohort = synthgen::generate_cohort(cfg);
  auto report = synthgen::planted_effect_oracle(cohort.latents, cohort.labels, cohort.measurements);

  // fitness -> resting heart rate is configured at -3 bpm per unit.
  double coef = report.coef(synthgen::kTraitFitness, kRestingHeartRate);
  double se = report.stderr_(synthgen::kTraitFitness, kRestingHeartRate);
  CHECK(std::abs(coef - (-3.0)) < 3.0 * se + 0.2);

  // age -> resting heart rate configured at +0.10 bpm per year.
  double age_coef = report.coef(synthgen::kTraitAge, kRestingHeartRate);
  double age_se = report.stderr_(synthgen::kTraitAge, kRestingHeartRate);
  CHECK(std::abs(age_coef - 0.10) < 3.0 * age_se + 0.02);

  // step count event multiplier 0.6 shows up as a group-mean ratio.
  CHECK(report.has_event_ratio[kStepCountWatch]);
  CHECK(report.event_ratio(kStepCountWatch) == doctest::Approx(0.6).epsilon(0.09));
}

TEST_CASE("oracle reports zero effects when coefficients are zero") {
  auto cfg = synthgen::GeneratorConfig::defaults(60, 6, 9);
  cfg.effect_coefficients.setZero();
  cfg.event_probability = 0.0;
  cfg.draw_rate_override[kRestingHeartRate] = 0.9;
  auto cohort = synthgen::generate_cohort(cfg);
  auto report = synthgen::planted_effect_oracle(cohort.latents, cohort.labels, cohort.measurements);
  for (int k = 0; k < synthgen::kNumTraits; ++k) {
    double coef = report.coef(k, kRestingHeartRate);
    double se = report.stderr_(k, kRestingHeartRate);
    CHECK(std::abs(coef) < 4.0 * se + 1e-9);
  }
}

TEST_CASE("hourly aggregation sums, means, and rejects unknown variables") {
  std::vector<MeasurementTuple> raw = {
      {1, 10, kStepCountWatch, 120},
      {1, 10, kStepCountWatch, 80},
      {1, 10, kHeartRate, 60},
      {1, 10, kHeartRate, 70},
      {1, 11, kHeartRate, 58},
      {1, 12, 99, 5.0},
  };
  auto result = pipeline::aggregate_hourly(raw);
  CHECK(result.rejected == 1);
  REQUIRE(result.hourly.size() == 3);
  CHECK(result.hourly[0].value == doctest::Approx(200.0));  // sum
  CHECK(result.hourly[1].value == doctest::Approx(65.0));   // mean
  CHECK(result.hourly[2].value == doctest::Approx(58.0));   // identity
}

TEST_CASE("week grids align hour-of-week rows") {
  std::vector<MeasurementTuple> hourly = {
      {1, 0, kHeartRate, 60},         // Monday 00
      {1, 167, kHeartRate, 61},       // Sunday 23
      {1, 168, kHeartRate, 62},       // next week Monday 00
      {1, 5 * 24 + 3, kStepCountWatch, 100},
  };
  auto grids = pipeline::build_week_grids(hourly);
  REQUIRE(grids.size() == 2);
  CHECK(grids[0].week_index == 0);
  CHECK(grids[0].mask(0, kHeartRate) == 1);
  CHECK(grids[0].mask(167, kHeartRate) == 1);
  CHECK(grids[0].mask(5 * 24 + 3, kStepCountWatch) == 1);
  CHECK(grids[1].week_index == 1);
  CHECK(grids[1].mask(0, kHeartRate) == 1);
  CHECK(grids[1].values(0, kHeartRate) == doctest::Approx(62.0));
}

namespace {

WeekGrid grid_with_heart_rate_on_days(std::initializer_list<int> days) {
  WeekGrid g;
  g.subject_id = 1;
  for (int d : days) {
    g.values(d * 24 + 8, kHeartRate) = 65.0;
    g.mask(d * 24 + 8, kHeartRate) = 1;
  }
  return g;
}

}  // namespace

TEST_CASE("wear filter needs five distinct days") {
  CHECK(pipeline::wear_filter(grid_with_heart_rate_on_days({0, 1, 2, 3, 4})));
  CHECK_FALSE(pipeline::wear_filter(grid_with_heart_rate_on_days({0, 1, 2, 3})));
  // 100 observations all on Monday: one unique day.
  WeekGrid monday;
  for (int h = 0; h < 24; ++h) {
    monday.values(h, kHeartRate) = 70;
    monday.mask(h, kHeartRate) = 1;
  }
  CHECK_FALSE(pipeline::wear_filter(monday));
  CHECK_FALSE(pipeline::wear_filter(WeekGrid{}));
}

TEST_CASE("cohort filter needs five weeks spanning 13") {
  auto week_at = [](std::int64_t w) {
    WeekGrid g;
    g.subject_id = 1;
    g.week_index = w;
    return g;
  };
  std::vector<WeekGrid> spanning = {week_at(0), week_at(4), week_at(9), week_at(15), week_at(20)};
  CHECK(pipeline::cohort_filter(spanning));
  std::vector<WeekGrid> four = {week_at(0), week_at(6), week_at(12), week_at(20)};
  CHECK_FALSE(pipeline::cohort_filter(four));
  std::vector<WeekGrid> consecutive;
  for (int w = 0; w < 10; ++w) consecutive.push_back(week_at(w));
  CHECK_FALSE(pipeline::cohort_filter(consecutive));  // span 9 < 13
}

TEST_CASE("split subjects partitions deterministically") {
  std::vector<std::uint64_t> ids;
  for (std::uint64_t i = 1; i <= 10; ++i) ids.push_back(i);
  auto s = pipeline::split_subjects(ids, 5);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
  auto s2 = pipeline::split_subjects(ids, 5);
  CHECK(s.train == s2.train);
  CHECK(s.val == s2.val);
  CHECK(s.test == s2.test);

  std::set<std::uint64_t> all;
  all.insert(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 10);

  std::vector<std::uint64_t> few = {1, 2, 3};
  CHECK_THROWS_AS(pipeline::split_subjects(few, 5), ConfigError);
}

TEST_CASE("norm stats and z-scoring") {
  WeekGrid g;
  g.values(0, kHeartRate) = 1.0;
  g.mask(0, kHeartRate) = 1;
  g.values(1, kHeartRate) = 3.0;
  g.mask(1, kHeartRate) = 1;
  auto stats = pipeline::fit_norm_stats({g});
  CHECK(stats.mean[kHeartRate] == doctest::Approx(2.0));
  CHECK(stats.stddev[kHeartRate] == doctest::Approx(1.0));
  // constant variable falls back to std 1
  WeekGrid c;
  c.values(0, kVo2Max) = 5.0;
  c.mask(0, kVo2Max) = 1;
  c.values(1, kVo2Max) = 5.0;
  c.mask(1, kVo2Max) = 1;
  auto cstats = pipeline::fit_norm_stats({c});
  CHECK(cstats.stddev[kVo2Max] == doctest::Approx(1.0));

  auto z = pipeline::apply_norm(g, stats);
  CHECK(z.values(0, kHeartRate) == doctest::Approx(-1.0));
  CHECK(z.values(1, kHeartRate) == doctest::Approx(1.0));
  // value at the mean maps to 0; unobserved cells are exactly 0
  CHECK(z.values(2, kHeartRate) == 0.0);
  CHECK(z.mask(2, kHeartRate) == 0);

  // clipping
  WeekGrid far;
  far.values(0, kHeartRate) = 2.0 + 10.0;  // mean + 10 sd
  far.mask(0, kHeartRate) = 1;
  auto zfar = pipeline::apply_norm(far, stats);
  CHECK(zfar.values(0, kHeartRate) == doctest::Approx(stats.clip_hi));
}

TEST_CASE("dense features layout and tuple stream ordering") {
  WeekGrid g;
  g.values(7, 3) = 2.5;
  g.mask(7, 3) = 1;
  g.values(7, 1) = 1.5;
  g.mask(7, 1) = 1;
  g.values(3, 20) = -0.5;
  g.mask(3, 20) = 1;
  auto dense = pipeline::to_dense_features(g);
  CHECK(dense.rows() == 168);
  CHECK(dense.cols() == 54);
  CHECK(dense(7, 3) == doctest::Approx(2.5));
  CHECK(dense(7, 3 + kNumVariables) == doctest::Approx(1.0));
  CHECK(dense(0, 0 + kNumVariables) == doctest::Approx(0.0));

  auto stream = pipeline::to_tuple_stream(g);
  REQUIRE(stream.size() == 3);
  CHECK(stream[0].hour == 3);
  CHECK(stream[1].hour == 7);
  CHECK(stream[1].variable_id == 1);  // tie broken by variable id
  CHECK(stream[2].variable_id == 3);
  CHECK(pipeline::to_tuple_stream(WeekGrid{}).empty());

  // Round trip: stream -> grid reproduces observed cells exactly.
  WeekGrid back;
  for (const auto& e : stream) {
    back.values(e.hour, e.variable_id) = e.value;
    back.mask(e.hour, e.variable_id) = 1;
  }
  CHECK(back.values == g.values);
  CHECK(back.mask == g.mask);
}

TEST_CASE("fully observed and fully missing dense grids") {
  WeekGrid full;
  full.mask.setConstant(1);
  auto dense = pipeline::to_dense_features(full);
  CHECK(dense.rightCols(kNumVariables).minCoeff() == doctest::Approx(1.0));
  auto empty = pipeline::to_dense_features(WeekGrid{});
  CHECK(empty.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}
