#include "wbm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "wbm/errors.hpp"
#include "wbm/rng.hpp"

namespace wbm::pipeline {

AggregateResult aggregate_hourly(const std::vector<MeasurementTuple>& raw) {
  struct Acc {
    double sum = 0.0;
    std::int64_t n = 0;
  };
  std::map<std::tuple<std::uint64_t, std::int64_t, int>, Acc> cells;
  AggregateResult result;
  for (const auto& t : raw) {
    if (t.variable_id < 0 || t.variable_id >= kNumVariables) {
      ++result.rejected;
      continue;
    }
    auto& a = cells[{t.subject_id, t.absolute_hour, t.variable_id}];
    a.sum += t.value;
    a.n += 1;
  }
  result.hourly.reserve(cells.size());
  for (const auto& [key, acc] : cells) {
    const auto& [subject, hour, var] = key;
    MeasurementTuple t;
    t.subject_id = subject;
    t.absolute_hour = hour;
    t.variable_id = var;
    t.value = variable_spec(var).hourly_aggregation == HourlyAgg::Sum
                  ? acc.sum
                  : acc.sum / static_cast<double>(acc.n);
    result.hourly.push_back(t);
  }
  return result;
}

std::vector<WeekGrid> build_week_grids(const std::vector<MeasurementTuple>& hourly) {
  std::map<std::pair<std::uint64_t, std::int64_t>, WeekGrid> grids;
  for (const auto& t : hourly) {
    if (t.variable_id < 0 || t.variable_id >= kNumVariables) continue;
    auto key = std::make_pair(t.subject_id, week_of_hour(t.absolute_hour));
    auto [it, inserted] = grids.try_emplace(key);
    if (inserted) {
      it->second.subject_id = t.subject_id;
      it->second.week_index = key.second;
    }
    int row = hour_of_week(t.absolute_hour);
    it->second.values(row, t.variable_id) = t.value;
    it->second.mask(row, t.variable_id) = 1;
  }
  std::vector<WeekGrid> out;
  out.reserve(grids.size());
  for (auto& [key, g] : grids) out.push_back(std::move(g));
  return out;
}

bool wear_filter(const WeekGrid& grid, int wear_min_days) {
  int days = 0;
  for (int day = 0; day < 7; ++day) {
    bool seen = false;
    for (int h = day * kHoursPerDay; h < (day + 1) * kHoursPerDay && !seen; ++h) {
      seen = grid.mask(h, kWearProxyVariable) != 0;
    }
    if (seen) ++days;
  }
  return days >= wear_min_days;
}

bool cohort_filter(const std::vector<WeekGrid>& weeks, int min_weeks, int min_span_weeks) {
  if (static_cast<int>(weeks.size()) < min_weeks) return false;
  std::int64_t lo = weeks.front().week_index, hi = weeks.front().week_index;
  for (const auto& g : weeks) {
    lo = std::min(lo, g.week_index);
    hi = std::max(hi, g.week_index);
  }
  return hi - lo >= min_span_weeks;
}

std::vector<WeekGrid> apply_filters(std::vector<WeekGrid> grids, const FilterConfig& cfg) {
  std::map<std::uint64_t, std::vector<WeekGrid>> by_subject;
  for (auto& g : grids) {
    if (wear_filter(g, cfg.wear_min_days)) by_subject[g.subject_id].push_back(std::move(g));
  }
  std::vector<WeekGrid> out;
  for (auto& [subject, weeks] : by_subject) {
    if (!cohort_filter(weeks, cfg.min_weeks, cfg.min_span_weeks)) continue;
    std::sort(weeks.begin(), weeks.end(),
              [](const WeekGrid& a, const WeekGrid& b) { return a.week_index < b.week_index; });
    for (auto& g : weeks) out.push_back(std::move(g));
  }
  return out;
}

io::SplitAssignment split_subjects(std::vector<std::uint64_t> subject_ids, std::uint64_t seed) {
  std::sort(subject_ids.begin(), subject_ids.end());
  subject_ids.erase(std::unique(subject_ids.begin(), subject_ids.end()), subject_ids.end());
  const std::size_t n = subject_ids.size();
  if (n < 10) throw ConfigError("split_subjects requires at least 10 subjects");

  Rng rng = Rng(seed).fork(0x5b117ull);
  rng.shuffle(subject_ids);

  std::size_t n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  std::size_t n_test = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  std::size_t n_train = n - n_val - n_test;

  io::SplitAssignment s;
  s.train.assign(subject_ids.begin(), subject_ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(subject_ids.begin() + static_cast<std::ptrdiff_t>(n_train),
               subject_ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(subject_ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), subject_ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

NormStats fit_norm_stats(const std::vector<WeekGrid>& train_grids, double clip_z) {
  if (train_grids.empty()) throw ConfigError("fit_norm_stats requires a nonempty training split");
  if (clip_z <= 0.0) throw ConfigError("pipeline.clip_z must be positive");

  NormStats stats;
  stats.clip_lo = -clip_z;
  stats.clip_hi = clip_z;

  // Two-pass mean/variance in double, fixed grid-then-cell order.
  std::array<double, kNumVariables> sum{};
  std::array<std::int64_t, kNumVariables> count{};
  for (const auto& g : train_grids) {
    for (int t = 0; t < kHoursPerWeek; ++t) {
      for (int v = 0; v < kNumVariables; ++v) {
        if (g.mask(t, v)) {
          sum[static_cast<std::size_t>(v)] += g.values(t, v);
          ++count[static_cast<std::size_t>(v)];
        }
      }
    }
  }
  for (int v = 0; v < kNumVariables; ++v) {
    if (count[static_cast<std::size_t>(v)] > 0) {
      stats.mean[static_cast<std::size_t>(v)] =
          sum[static_cast<std::size_t>(v)] / static_cast<double>(count[static_cast<std::size_t>(v)]);
      stats.observed_in_train[static_cast<std::size_t>(v)] = true;
    }
  }
  std::array<double, kNumVariables> sq{};
  for (const auto& g : train_grids) {
    for (int t = 0; t < kHoursPerWeek; ++t) {
      for (int v = 0; v < kNumVariables; ++v) {
        if (g.mask(t, v)) {
          double d = g.values(t, v) - stats.mean[static_cast<std::size_t>(v)];
          sq[static_cast<std::size_t>(v)] += d * d;
        }
      }
    }
  }
  for (int v = 0; v < kNumVariables; ++v) {
    auto i = static_cast<std::size_t>(v);
    double sd = count[i] > 0 ? std::sqrt(sq[i] / static_cast<double>(count[i])) : 0.0;
    stats.stddev[i] = sd > 0.0 ? sd : 1.0;  // degenerate/unseen variables fall back to 1
  }
  return stats;
}

WeekGrid apply_norm(const WeekGrid& grid, const NormStats& stats) {
  WeekGrid out;
  out.subject_id = grid.subject_id;
  out.week_index = grid.week_index;
  out.mask = grid.mask;
  for (int t = 0; t < kHoursPerWeek; ++t) {
    for (int v = 0; v < kNumVariables; ++v) {
      if (grid.mask(t, v)) {
        auto i = static_cast<std::size_t>(v);
        double z = (grid.values(t, v) - stats.mean[i]) / stats.stddev[i];
        out.values(t, v) = std::clamp(z, stats.clip_lo, stats.clip_hi);
      } else {
        out.values(t, v) = 0.0;  // global-mean imputation in z units
      }
    }
  }
  return out;
}

MatrixD to_dense_features(const WeekGrid& grid) {
  MatrixD dense(kHoursPerWeek, kDenseWidth);
  dense.leftCols(kNumVariables) = grid.values;
  dense.rightCols(kNumVariables) = grid.mask.cast<double>();
  return dense;
}

std::vector<TupleEntry> to_tuple_stream(const WeekGrid& grid) {
  std::vector<TupleEntry> out;
  for (int t = 0; t < kHoursPerWeek; ++t) {
    for (int v = 0; v < kNumVariables; ++v) {
      if (grid.mask(t, v)) out.push_back({t, v, grid.values(t, v)});
    }
  }
  return out;  // row-major scan already yields (hour, variable_id) order
}

}  // namespace wbm::pipeline
