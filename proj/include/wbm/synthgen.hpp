#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wbm/data.hpp"
#include "wbm/rng.hpp"

namespace wbm::synthgen {

// Latent traits behind every planted effect. Order fixes the rows of the
// effect-coefficient matrix and the oracle report.
enum Trait : int { kTraitAge = 0, kTraitSex = 1, kTraitFitness = 2, kTraitActivity = 3 };
inline constexpr int kNumTraits = 4;
const char* trait_name(int trait);

struct SubjectLatent {
  std::uint64_t subject_id = 0;
  double age = 0.0;             // years, [18, 90]
  int sex = 0;                  // binary flag
  double fitness = 0.0;         // [-2, 2]
  double activity_level = 0.0;  // [-2, 2]
  std::vector<std::int64_t> week_indices;  // sorted, distinct
  std::vector<std::int64_t> event_weeks;   // subset of week_indices, sorted
};

struct GeneratorConfig {
  int n_subjects = 0;
  int weeks_per_subject = 0;  // >= 5
  // Enrollment span in weeks; generated week indices live in [0, span).
  // 0 means auto: weeks_per_subject + 7, at least 14, so the cohort filter's
  // 13-week span requirement is satisfiable.
  int span_weeks = 0;
  double event_probability = 0.35;
  int event_duration_weeks = 2;

  // P(week has >= 1 value) per variable; defaults come from the registry.
  std::array<double, kNumVariables> weekly_rates{};
  // Optional direct per-draw probability (per hour / day / bin / week, or
  // Poisson rate for opportunistic variables). Negative = derive from the
  // weekly rate instead.
  std::array<double, kNumVariables> draw_rate_override{};

  // Additive mean shift per unit of (centered) trait, traits x variables.
  MatrixD effect_coefficients = MatrixD::Zero(kNumTraits, kNumVariables);
  // Event-week adjustments: additive for MEAN variables, multiplicative for
  // SUM variables.
  std::array<double, kNumVariables> event_shift{};
  std::array<double, kNumVariables> event_multiplier{};

  double noise_scale = 1.0;
  std::uint64_t rng_seed = 0;

  // Registry-seeded weekly rates, planted default effects, unit multipliers.
  static GeneratorConfig defaults(int n_subjects, int weeks_per_subject, std::uint64_t seed);

  void validate() const;  // throws ConfigError naming the offending key
  int effective_span() const;
};

struct Cohort {
  std::vector<SubjectLatent> latents;
  std::vector<MeasurementTuple> measurements;  // sorted (subject, hour, variable)
  LabelSet labels;                             // one row per generated subject-week
};

// Deterministic in (config, seed): identical configs yield byte-identical
// tuple streams. Each subject draws from an independent substream.
Cohort generate_cohort(const GeneratorConfig& config);

struct EffectOracleReport {
  MatrixD coef = MatrixD::Zero(kNumTraits, kNumVariables);     // OLS fit of weekly means on traits
  MatrixD stderr_ = MatrixD::Zero(kNumTraits, kNumVariables);  // per-coefficient standard error
  VectorD event_ratio = VectorD::Zero(kNumVariables);          // event-week mean / other-week mean
  std::array<bool, kNumVariables> has_event_ratio{};
  std::array<std::int64_t, kNumVariables> week_count{};
};

// Ordinary-least-squares fit of each variable's generated weekly mean on the
// latent traits, plus event/non-event group mean ratios. This is the planted
// ground truth downstream probes are judged against.
EffectOracleReport planted_effect_oracle(const std::vector<SubjectLatent>& latents,
                                         const LabelSet& labels,
                                         const std::vector<MeasurementTuple>& measurements);

std::string oracle_to_csv(const EffectOracleReport& report);

std::string latents_to_csv(const std::vector<SubjectLatent>& latents);

}  // namespace wbm::synthgen
