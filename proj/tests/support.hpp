#pragma once

#include <functional>
#include <string>

#include "wbm/nn.hpp"
#include "wbm/tape.hpp"

namespace wbm::testing {

// Central finite-difference gradient check against the tape's reverse-mode
// gradients. `build` must be a pure function of (tape, vars). Returns the
// worst relative error over every scalar parameter.
inline double gradcheck(
    const std::function<ad::Var<double>(ad::Tape<double>&, const nn::VarMap<double>&)>& build,
    const nn::ParamTree<double>& params, double step = 1e-5, std::string* worst_name = nullptr,
    const std::function<bool(const std::string&)>& filter = {}) {
  auto eval = [&](const nn::ParamTree<double>& p) {
    ad::Tape<double> tape;
    nn::VarMap<double> vars = nn::upload(tape, p, false);
    return ad::scalar_value(build(tape, vars));
  };

  auto [loss, grads] = nn::value_and_grad(build, params);
  (void)loss;

  double worst = 0.0;
  nn::ParamTree<double> probe = params;
  for (auto& [name, tensor] : probe.tensors) {
    if (filter && !filter(name)) continue;
    const Matrix<double>& analytic = grads.at(name);
    for (Eigen::Index i = 0; i < tensor.rows(); ++i) {
      for (Eigen::Index j = 0; j < tensor.cols(); ++j) {
        double keep = tensor(i, j);
        tensor(i, j) = keep + step;
        double up = eval(probe);
        tensor(i, j) = keep - step;
        double down = eval(probe);
        tensor(i, j) = keep;
        double numeric = (up - down) / (2.0 * step);
        double a = analytic(i, j);
        double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (err > worst) {
          worst = err;
          if (worst_name) *worst_name = name;
        }
      }
    }
  }
  return worst;
}

inline Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal(0.0, scale);
  }
  return m;
}

}  // namespace wbm::testing

#include "wbm/synthgen.hpp"

namespace wbm::testing {

// Gradchecks need a non-degenerate parameter point: zero-initialized biases
// leave empty-hour tokens exactly zero, where row norms are non-smooth and
// finite differences blow up.
inline void jitter_tree(nn::ParamTree<double>& params, std::uint64_t seed, double sd = 0.05) {
  Rng rng(seed);
  for (auto& [name, tensor] : params.tensors) {
    for (Eigen::Index i = 0; i < tensor.rows(); ++i) {
      for (Eigen::Index j = 0; j < tensor.cols(); ++j) tensor(i, j) += rng.normal(0.0, sd);
    }
  }
}

// Cohort with watch-wear-dense observation rates: most weeks pass the wear
// filter and every subject spans >= 14 weeks, so pipelines have data to work
// with at desk scale.
inline synthgen::GeneratorConfig dense_cohort_config(int n_subjects, int weeks, std::uint64_t seed) {
  auto cfg = synthgen::GeneratorConfig::defaults(n_subjects, weeks, seed);
  auto& r = cfg.draw_rate_override;
  r[kHeartRate] = 0.35;
  r[kStepCountWatch] = 0.30;
  r[kStepCountPhone] = 0.25;
  r[kActiveEnergy] = 0.30;
  r[kBasalEnergy] = 0.35;
  r[kExerciseMinutes] = 0.12;
  r[kStandTime] = 0.25;
  r[kFlightsClimbedPhone] = 0.06;
  r[kFlightsClimbedWatch] = 0.06;
  r[kRestingHeartRate] = 0.95;
  r[kWalkingHeartRate] = 0.85;
  r[kWristTemperature] = 0.25;
  r[kHeartRateVariability] = 0.50;
  r[kBloodOxygen] = 0.30;
  r[kRespiratoryRate] = 0.30;
  r[kWalkingSpeed] = 0.20;
  r[kWalkingStepLength] = 0.20;
  r[kWalkingDoubleSupport] = 0.18;
  r[kWalkingAsymmetry] = 0.10;
  r[kStairAscentSpeed] = 0.06;
  r[kStairDescentSpeed] = 0.06;
  r[kWalkingSteadiness] = 0.70;
  r[kSixMinuteWalk] = 0.60;
  r[kVo2Max] = 1.5;
  r[kBodyMass] = 0.8;
  r[kBodyMassIndex] = 0.5;
  r[kFallCount] = 0.02;
  return cfg;
}

}  // namespace wbm::testing
