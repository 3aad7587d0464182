#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "wbm/variables.hpp"

namespace wbm {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;
using VectorD = Vector<double>;
using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// One observation. absolute_hour counts hours since an epoch whose hour 0 is
// a Monday 00:00, so hour_of_week = absolute_hour % 168.
struct MeasurementTuple {
  std::uint64_t subject_id = 0;
  std::int64_t absolute_hour = 0;
  int variable_id = 0;
  double value = 0.0;

  friend bool operator==(const MeasurementTuple&, const MeasurementTuple&) = default;
};

inline int hour_of_week(std::int64_t absolute_hour) {
  std::int64_t h = absolute_hour % kHoursPerWeek;
  return static_cast<int>(h < 0 ? h + kHoursPerWeek : h);
}

inline std::int64_t week_of_hour(std::int64_t absolute_hour) {
  std::int64_t w = absolute_hour / kHoursPerWeek;
  if (absolute_hour % kHoursPerWeek < 0) --w;
  return w;
}

// Dense 168 x 27 values plus a parallel observation mask. Row t is
// hour-of-week t (0 = Monday 00:00). mask(t,v) == 0 implies values(t,v)
// holds the imputation constant.
struct WeekGrid {
  std::uint64_t subject_id = 0;
  std::int64_t week_index = 0;
  MatrixD values = MatrixD::Zero(kHoursPerWeek, kNumVariables);
  MaskMatrix mask = MaskMatrix::Zero(kHoursPerWeek, kNumVariables);

  Eigen::Index observed_count() const { return mask.cast<Eigen::Index>().sum(); }
};

struct WeekLabel {
  std::uint64_t subject_id = 0;
  double age = 0.0;
  int sex = 0;
  std::int64_t week_index = 0;
  int event_flag = 0;
};

struct LabelSet {
  std::vector<WeekLabel> rows;  // one per (subject, week), subject-major order
};

// Tokenizer output: one D-dimensional row per token plus its hour-of-week.
// variable_ids is populated by the tuple tokenizer only.
template <typename S>
struct TokenSequence {
  Matrix<S> tokens;             // L x D
  std::vector<int> positions;   // hour-of-week per token, 0..167
  std::vector<int> variable_ids;
};

}  // namespace wbm
