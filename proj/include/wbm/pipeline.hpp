#pragma once

#include <array>
#include <cstdint>
#include <tuple>
#include <vector>

#include "wbm/data.hpp"
#include "wbm/io.hpp"

namespace wbm::pipeline {

struct AggregateResult {
  std::vector<MeasurementTuple> hourly;  // <= one tuple per (subject, hour, variable)
  std::int64_t rejected = 0;             // records with unknown variable ids
};

// SUM variables are summed within the hour, MEAN variables averaged. Output
// is sorted by (subject, hour, variable).
AggregateResult aggregate_hourly(const std::vector<MeasurementTuple>& raw);

// One grid per (subject, week) that has at least one observation. Row index
// is hour-of-week with 0 = Monday 00:00.
std::vector<WeekGrid> build_week_grids(const std::vector<MeasurementTuple>& hourly);

struct FilterConfig {
  int wear_min_days = 5;    // distinct days with the wear-proxy variable
  int min_weeks = 5;        // usable weeks per subject
  int min_span_weeks = 13;  // last usable week - first usable week
};

// True iff the wear-proxy variable (heart rate) is observed on at least
// wear_min_days distinct days of the week.
bool wear_filter(const WeekGrid& grid, int wear_min_days = 5);

// True iff >= min_weeks weeks survive and they span >= min_span_weeks.
// `weeks` must all belong to one subject and have already passed wear_filter.
bool cohort_filter(const std::vector<WeekGrid>& weeks, int min_weeks = 5, int min_span_weeks = 13);

// Applies wear then cohort filters; returns surviving grids sorted by
// (subject, week).
std::vector<WeekGrid> apply_filters(std::vector<WeekGrid> grids, const FilterConfig& cfg);

// Deterministic 80/10/10 subject-level partition (sizes within one subject
// of exact proportions). Throws ConfigError for fewer than 10 subjects.
io::SplitAssignment split_subjects(std::vector<std::uint64_t> subject_ids, std::uint64_t seed);

struct NormStats {
  std::array<double, kNumVariables> mean{};
  std::array<double, kNumVariables> stddev{};  // fallback 1 for unseen/constant variables
  std::array<bool, kNumVariables> observed_in_train{};
  double clip_lo = -4.0;
  double clip_hi = 4.0;
};

// Per-variable mean/std over observed cells of the training grids only
// (population standard deviation, accumulated in a fixed order).
NormStats fit_norm_stats(const std::vector<WeekGrid>& train_grids, double clip_z = 4.0);

// Observed cells are z-scored then clipped to [clip_lo, clip_hi]; unobserved
// cells become exactly 0.
WeekGrid apply_norm(const WeekGrid& grid, const NormStats& stats);

// 168 x 54: columns 0-26 are values, 27-53 the observation mask.
MatrixD to_dense_features(const WeekGrid& grid);

struct TupleEntry {
  int hour = 0;  // hour-of-week
  int variable_id = 0;
  double value = 0.0;
  friend bool operator==(const TupleEntry&, const TupleEntry&) = default;
};

// One entry per observed cell, hour ascending, ties broken by variable_id.
std::vector<TupleEntry> to_tuple_stream(const WeekGrid& grid);

}  // namespace wbm::pipeline
