#include "wbm/synthgen.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "wbm/errors.hpp"
#include "wbm/io.hpp"

namespace wbm::synthgen {

namespace {

// Per-variable generative model: base level, observation noise, and the hour
// window in which the variable can be emitted.
struct VarModel {
  double base;      // mean hourly total (SUM) or mean level (MEAN)
  double noise_sd;  // per-observation noise for MEAN variables
  int hour_lo;      // eligible hours of day, inclusive
  int hour_hi;
};

constexpr std::array<VarModel, kNumVariables> kVarModels = {{
    /*flights_phone*/ {1.6, 0.0, 7, 23},
    /*flights_watch*/ {1.4, 0.0, 7, 23},
    /*active_energy*/ {30.0, 0.0, 7, 23},
    /*basal_energy*/ {70.0, 0.0, 7, 23},
    /*steps_phone*/ {330.0, 0.0, 7, 23},
    /*steps_watch*/ {430.0, 0.0, 7, 23},
    /*exercise_min*/ {3.5, 0.0, 7, 23},
    /*stand_time*/ {24.0, 0.0, 7, 23},
    /*resting_hr*/ {62.0, 2.0, 0, 23},
    /*walking_hr*/ {104.0, 4.0, 7, 23},
    /*heart_rate*/ {76.0, 5.0, 0, 23},
    /*hrv_sdnn*/ {46.0, 9.0, 0, 23},
    /*resp_rate*/ {15.5, 0.9, 0, 6},
    /*blood_oxygen*/ {97.3, 0.7, 0, 23},
    /*wrist_temp*/ {0.0, 0.25, 0, 6},
    /*walking_speed*/ {1.35, 0.11, 7, 23},
    /*step_length*/ {0.72, 0.05, 7, 23},
    /*double_support*/ {28.0, 1.8, 7, 23},
    /*asymmetry*/ {3.0, 1.4, 7, 23},
    /*stair_ascent*/ {0.55, 0.07, 7, 23},
    /*stair_descent*/ {0.65, 0.08, 7, 23},
    /*fall_count*/ {1.0, 0.0, 7, 23},
    /*steadiness*/ {78.0, 5.0, 7, 23},
    /*body_mass*/ {74.0, 0.6, 7, 23},
    /*bmi*/ {26.5, 0.3, 7, 23},
    /*vo2_max*/ {38.0, 1.8, 7, 23},
    /*six_min_walk*/ {520.0, 22.0, 7, 23},
}};

// Waking-hour weight profile for SUM variables; mean over hours 7..23 is ~1
// so planted per-hour means stay interpretable.
double diurnal_weight(int hour_of_day) {
  if (hour_of_day < 7) return 0.15;
  if (hour_of_day < 10) return 0.85;
  if (hour_of_day < 18) return 1.30;
  if (hour_of_day < 22) return 1.00;
  return 0.40;
}

// Small day-night swing for heart rate style variables.
double diurnal_shift(int variable_id, int hour_of_day) {
  if (variable_id == kHeartRate) {
    if (hour_of_day <= 6) return -5.0;
    if (hour_of_day >= 10 && hour_of_day <= 18) return 2.0;
  }
  return 0.0;
}

int eligible_hours_per_day(const VarModel& m) { return m.hour_hi - m.hour_lo + 1; }

double backsolve_rate(double weekly_rate, double draws_per_week) {
  double r = std::clamp(weekly_rate, 0.0, 1.0 - 1e-12);
  return 1.0 - std::pow(1.0 - r, 1.0 / draws_per_week);
}

struct TraitVector {
  std::array<double, kNumTraits> v;
};

TraitVector centered_traits(const SubjectLatent& s) {
  // Centering keeps base levels interpretable; OLS slopes are unaffected.
  return {{s.age - 54.0, s.sex - 0.5, s.fitness, s.activity_level}};
}

double trait_shift(const GeneratorConfig& cfg, const TraitVector& t, int var) {
  double shift = 0.0;
  for (int k = 0; k < kNumTraits; ++k) shift += cfg.effect_coefficients(k, var) * t.v[k];
  return shift;
}

}  // namespace

const char* trait_name(int trait) {
  switch (trait) {
    case kTraitAge: return "age";
    case kTraitSex: return "sex";
    case kTraitFitness: return "fitness";
    case kTraitActivity: return "activity_level";
    default: return "unknown";
  }
}

GeneratorConfig GeneratorConfig::defaults(int n_subjects, int weeks_per_subject, std::uint64_t seed) {
  GeneratorConfig cfg;
  cfg.n_subjects = n_subjects;
  cfg.weeks_per_subject = weeks_per_subject;
  cfg.rng_seed = seed;
  for (const auto& spec : variable_registry()) cfg.weekly_rates[spec.variable_id] = spec.weekly_rate;
  cfg.draw_rate_override.fill(-1.0);
  cfg.event_shift.fill(0.0);
  cfg.event_multiplier.fill(1.0);

  MatrixD& e = cfg.effect_coefficients;
  // Age (per year).
  e(kTraitAge, kRestingHeartRate) = 0.10;
  e(kTraitAge, kHeartRate) = 0.08;
  e(kTraitAge, kWalkingHeartRate) = 0.10;
  e(kTraitAge, kHeartRateVariability) = -0.35;
  e(kTraitAge, kWalkingSpeed) = -0.0040;
  e(kTraitAge, kWalkingStepLength) = -0.0020;
  e(kTraitAge, kWalkingDoubleSupport) = 0.06;
  e(kTraitAge, kWalkingSteadiness) = -0.25;
  e(kTraitAge, kVo2Max) = -0.22;
  e(kTraitAge, kSixMinuteWalk) = -1.8;
  e(kTraitAge, kStepCountWatch) = -2.5;
  e(kTraitAge, kStepCountPhone) = -2.0;
  e(kTraitAge, kActiveEnergy) = -0.15;
  // Sex (binary, centered).
  e(kTraitSex, kBasalEnergy) = 9.0;
  e(kTraitSex, kBodyMass) = 10.0;
  e(kTraitSex, kVo2Max) = 4.0;
  e(kTraitSex, kSixMinuteWalk) = 30.0;
  e(kTraitSex, kHeartRate) = -2.0;
  // Fitness (unitless).
  e(kTraitFitness, kRestingHeartRate) = -3.0;
  e(kTraitFitness, kHeartRate) = -2.5;
  e(kTraitFitness, kWalkingHeartRate) = -3.5;
  e(kTraitFitness, kHeartRateVariability) = 3.0;
  e(kTraitFitness, kVo2Max) = 4.0;
  e(kTraitFitness, kSixMinuteWalk) = 25.0;
  e(kTraitFitness, kWalkingSpeed) = 0.05;
  e(kTraitFitness, kBodyMass) = -2.0;
  // Activity level (unitless).
  e(kTraitActivity, kStepCountWatch) = 90.0;
  e(kTraitActivity, kStepCountPhone) = 70.0;
  e(kTraitActivity, kActiveEnergy) = 6.0;
  e(kTraitActivity, kExerciseMinutes) = 1.2;
  e(kTraitActivity, kStandTime) = 4.0;
  e(kTraitActivity, kFlightsClimbedPhone) = 0.4;
  e(kTraitActivity, kFlightsClimbedWatch) = 0.4;
  e(kTraitActivity, kHeartRate) = 1.0;

  // Transient illness/injury-like state: less movement, elevated vitals.
  cfg.event_multiplier[kStepCountWatch] = 0.60;
  cfg.event_multiplier[kStepCountPhone] = 0.60;
  cfg.event_multiplier[kActiveEnergy] = 0.65;
  cfg.event_multiplier[kExerciseMinutes] = 0.40;
  cfg.event_multiplier[kStandTime] = 0.80;
  cfg.event_multiplier[kFlightsClimbedPhone] = 0.60;
  cfg.event_multiplier[kFlightsClimbedWatch] = 0.60;
  cfg.event_shift[kRestingHeartRate] = 6.0;
  cfg.event_shift[kHeartRate] = 4.0;
  cfg.event_shift[kRespiratoryRate] = 1.5;
  cfg.event_shift[kWristTemperature] = 0.5;
  cfg.event_shift[kWalkingSpeed] = -0.12;
  cfg.event_shift[kWalkingAsymmetry] = 1.2;
  cfg.event_shift[kWalkingDoubleSupport] = 1.5;
  return cfg;
}

void GeneratorConfig::validate() const {
  if (n_subjects <= 0) throw ConfigError("generator.n_subjects must be positive");
  if (weeks_per_subject < 5) throw ConfigError("generator.weeks_per_subject must be >= 5");
  if (span_weeks != 0 && span_weeks < weeks_per_subject) {
    throw ConfigError("generator.span_weeks must be 0 (auto) or >= weeks_per_subject");
  }
  if (event_probability < 0.0 || event_probability > 1.0) {
    throw ConfigError("generator.event_probability must be in [0, 1]");
  }
  if (event_duration_weeks < 1) throw ConfigError("generator.event_duration_weeks must be >= 1");
  for (int v = 0; v < kNumVariables; ++v) {
    if (weekly_rates[v] < 0.0 || weekly_rates[v] > 1.0) {
      throw ConfigError(std::string("generator.rates.") + std::string(variable_spec(v).name) +
                        " must be in [0, 1]");
    }
  }
  if (noise_scale < 0.0) throw ConfigError("generator.noise_scale must be >= 0");
}

int GeneratorConfig::effective_span() const {
  if (span_weeks > 0) return span_weeks;
  return std::max(weeks_per_subject + 7, 14);
}

namespace {

SubjectLatent draw_latent(const GeneratorConfig& cfg, std::uint64_t subject_id, Rng& rng) {
  SubjectLatent s;
  s.subject_id = subject_id;
  s.age = rng.uniform(18.0, 90.0);
  s.sex = rng.bernoulli(0.5) ? 1 : 0;
  s.fitness = std::clamp(rng.normal(0.0, 0.8), -2.0, 2.0);
  s.activity_level = std::clamp(rng.normal(0.0, 0.8), -2.0, 2.0);

  const int span = cfg.effective_span();
  const int n_weeks = cfg.weeks_per_subject;
  std::set<std::int64_t> weeks;
  if (n_weeks >= span) {
    for (int w = 0; w < span; ++w) weeks.insert(w);
  } else {
    // Pin the first and last week so every subject spans the full window.
    weeks.insert(0);
    weeks.insert(span - 1);
    while (static_cast<int>(weeks.size()) < n_weeks) {
      weeks.insert(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(span))));
    }
  }
  s.week_indices.assign(weeks.begin(), weeks.end());

  if (cfg.event_probability > 0.0 && rng.bernoulli(cfg.event_probability)) {
    std::size_t k = static_cast<std::size_t>(rng.below(s.week_indices.size()));
    std::int64_t start = s.week_indices[k];
    for (std::int64_t w : s.week_indices) {
      if (w >= start && w < start + cfg.event_duration_weeks) s.event_weeks.push_back(w);
    }
  }
  return s;
}

void emit_value(std::vector<MeasurementTuple>& out, const GeneratorConfig& cfg,
                const SubjectLatent& subj, const TraitVector& traits, int var, bool event_week,
                std::int64_t absolute_hour, Rng& rng, double overdispersion) {
  const auto& spec = variable_spec(var);
  const VarModel& model = kVarModels[static_cast<std::size_t>(var)];
  const int hod = static_cast<int>((absolute_hour % 24 + 24) % 24);

  MeasurementTuple t;
  t.subject_id = subj.subject_id;
  t.absolute_hour = absolute_hour;
  t.variable_id = var;

  if (spec.hourly_aggregation == HourlyAgg::Sum) {
    double mean_total = model.base + trait_shift(cfg, traits, var);
    if (event_week) mean_total *= cfg.event_multiplier[static_cast<std::size_t>(var)];
    mean_total = std::max(0.0, mean_total) * diurnal_weight(hod) * overdispersion;
    // Occasionally split the hour's total into two raw records so hourly
    // aggregation has real work to do.
    int parts = rng.bernoulli(0.25) ? 2 : 1;
    for (int i = 0; i < parts; ++i) {
      t.value = static_cast<double>(rng.poisson(mean_total / parts));
      out.push_back(t);
    }
  } else {
    double mean = model.base + trait_shift(cfg, traits, var) + diurnal_shift(var, hod);
    if (event_week) mean += cfg.event_shift[static_cast<std::size_t>(var)];
    int parts = (spec.sampling_class == SamplingClass::SubHourly && rng.bernoulli(0.2)) ? 2 : 1;
    for (int i = 0; i < parts; ++i) {
      t.value = mean + rng.normal(0.0, model.noise_sd * cfg.noise_scale);
      out.push_back(t);
    }
  }
}

void generate_subject_week_var(std::vector<MeasurementTuple>& out, const GeneratorConfig& cfg,
                               const SubjectLatent& subj, const TraitVector& traits,
                               std::int64_t week, int var, const Rng& subject_rng) {
  Rng rng = subject_rng.fork(static_cast<std::uint64_t>(week), static_cast<std::uint64_t>(var));
  const auto& spec = variable_spec(var);
  const VarModel& model = kVarModels[static_cast<std::size_t>(var)];
  const bool event_week =
      std::binary_search(subj.event_weeks.begin(), subj.event_weeks.end(), week);
  const double weekly_rate = cfg.weekly_rates[static_cast<std::size_t>(var)];
  const double override_rate = cfg.draw_rate_override[static_cast<std::size_t>(var)];
  const std::int64_t week_start = week * kHoursPerWeek;
  const int hours_per_day = eligible_hours_per_day(model);

  // Over-dispersion shared across the week keeps counts correlated in time.
  double overdispersion = 1.0;
  if (spec.hourly_aggregation == HourlyAgg::Sum) overdispersion = rng.gamma(8.0, 1.0 / 8.0);

  auto hour_at = [&](int day, int hour_of_day) {
    return week_start + day * kHoursPerDay + hour_of_day;
  };
  auto random_eligible_hour = [&](int day) {
    return hour_at(day, model.hour_lo + static_cast<int>(rng.below(
                            static_cast<std::uint64_t>(hours_per_day))));
  };

  switch (spec.sampling_class) {
    case SamplingClass::SubHourly: {
      double p = override_rate >= 0.0
                     ? override_rate
                     : backsolve_rate(weekly_rate, 7.0 * hours_per_day);
      for (int day = 0; day < 7; ++day) {
        for (int h = model.hour_lo; h <= model.hour_hi; ++h) {
          if (rng.bernoulli(p)) {
            emit_value(out, cfg, subj, traits, var, event_week, hour_at(day, h), rng, overdispersion);
          }
        }
      }
      break;
    }
    case SamplingClass::Daily: {
      double p = override_rate >= 0.0 ? override_rate : backsolve_rate(weekly_rate, 7.0);
      for (int day = 0; day < 7; ++day) {
        if (rng.bernoulli(p)) {
          emit_value(out, cfg, subj, traits, var, event_week, random_eligible_hour(day), rng,
                     overdispersion);
        }
      }
      break;
    }
    case SamplingClass::FewHourly: {
      // One candidate draw per 4-hour bin of eligible time.
      int bins_per_day = std::max(1, hours_per_day / 4);
      double p = override_rate >= 0.0
                     ? override_rate
                     : backsolve_rate(weekly_rate, 7.0 * bins_per_day);
      for (int day = 0; day < 7; ++day) {
        for (int b = 0; b < bins_per_day; ++b) {
          if (rng.bernoulli(p)) {
            int h = model.hour_lo + b * 4 + static_cast<int>(rng.below(4));
            h = std::min(h, model.hour_hi);
            emit_value(out, cfg, subj, traits, var, event_week, hour_at(day, h), rng, overdispersion);
          }
        }
      }
      break;
    }
    case SamplingClass::Weekly: {
      double p = override_rate >= 0.0 ? override_rate : weekly_rate;
      if (rng.bernoulli(p)) {
        int day = static_cast<int>(rng.below(7));
        emit_value(out, cfg, subj, traits, var, event_week, random_eligible_hour(day), rng,
                   overdispersion);
      }
      break;
    }
    case SamplingClass::Opportunistic: {
      double lambda = override_rate >= 0.0
                          ? override_rate
                          : -std::log(1.0 - std::clamp(weekly_rate, 0.0, 1.0 - 1e-12));
      std::uint64_t n = rng.poisson(lambda);
      for (std::uint64_t i = 0; i < n; ++i) {
        int day = static_cast<int>(rng.below(7));
        emit_value(out, cfg, subj, traits, var, event_week, random_eligible_hour(day), rng,
                   overdispersion);
      }
      break;
    }
  }
}

}  // namespace

Cohort generate_cohort(const GeneratorConfig& config) {
  config.validate();
  Cohort cohort;
  cohort.latents.reserve(static_cast<std::size_t>(config.n_subjects));
  Rng root(config.rng_seed);

  for (int i = 0; i < config.n_subjects; ++i) {
    std::uint64_t subject_id = static_cast<std::uint64_t>(i + 1);
    Rng subject_rng = root.fork(subject_id);
    Rng latent_rng = subject_rng.fork(0xabcdef);
    SubjectLatent subj = draw_latent(config, subject_id, latent_rng);
    TraitVector traits = centered_traits(subj);

    for (std::int64_t week : subj.week_indices) {
      for (int var = 0; var < kNumVariables; ++var) {
        generate_subject_week_var(cohort.measurements, config, subj, traits, week, var, subject_rng);
      }
      WeekLabel label;
      label.subject_id = subject_id;
      label.age = subj.age;
      label.sex = subj.sex;
      label.week_index = week;
      label.event_flag =
          std::binary_search(subj.event_weeks.begin(), subj.event_weeks.end(), week) ? 1 : 0;
      cohort.labels.rows.push_back(label);
    }
    cohort.latents.push_back(std::move(subj));
  }

  std::stable_sort(cohort.measurements.begin(), cohort.measurements.end(),
                   [](const MeasurementTuple& a, const MeasurementTuple& b) {
                     if (a.subject_id != b.subject_id) return a.subject_id < b.subject_id;
                     if (a.absolute_hour != b.absolute_hour) return a.absolute_hour < b.absolute_hour;
                     return a.variable_id < b.variable_id;
                   });
  return cohort;
}

EffectOracleReport planted_effect_oracle(const std::vector<SubjectLatent>& latents,
                                         const LabelSet& labels,
                                         const std::vector<MeasurementTuple>& measurements) {
  if (latents.empty()) throw ConfigError("oracle requires a generated cohort");

  std::map<std::uint64_t, const SubjectLatent*> by_id;
  for (const auto& s : latents) by_id[s.subject_id] = &s;
  std::map<std::pair<std::uint64_t, std::int64_t>, int> event_flag;
  for (const auto& r : labels.rows) event_flag[{r.subject_id, r.week_index}] = r.event_flag;

  // Hourly aggregation first (sum or mean within the hour), then the weekly
  // mean of the hourly values.
  struct Acc {
    double sum = 0.0;
    std::int64_t n = 0;
  };
  std::map<std::tuple<std::uint64_t, std::int64_t, int, std::int64_t>, Acc> hourly;
  for (const auto& m : measurements) {
    auto& a = hourly[{m.subject_id, week_of_hour(m.absolute_hour), m.variable_id, m.absolute_hour}];
    a.sum += m.value;
    a.n += 1;
  }
  std::map<std::tuple<std::uint64_t, std::int64_t, int>, Acc> weekly;
  for (const auto& [key, acc] : hourly) {
    const auto& [subject, week, var, hour] = key;
    double hourly_value = variable_spec(var).hourly_aggregation == HourlyAgg::Sum
                              ? acc.sum
                              : acc.sum / static_cast<double>(acc.n);
    auto& w = weekly[{subject, week, var}];
    w.sum += hourly_value;
    w.n += 1;
  }

  EffectOracleReport report;
  for (int var = 0; var < kNumVariables; ++var) {
    std::vector<double> y;
    std::vector<std::array<double, kNumTraits>> x;
    double event_sum = 0.0, other_sum = 0.0;
    std::int64_t event_n = 0, other_n = 0;
    for (const auto& [key, acc] : weekly) {
      const auto& [subject, week, v] = key;
      if (v != var) continue;
      auto it = by_id.find(subject);
      if (it == by_id.end()) continue;
      double mean = acc.sum / static_cast<double>(acc.n);
      TraitVector t = centered_traits(*it->second);
      y.push_back(mean);
      x.push_back(t.v);
      if (event_flag[{subject, week}]) {
        event_sum += mean;
        ++event_n;
      } else {
        other_sum += mean;
        ++other_n;
      }
    }
    report.week_count[static_cast<std::size_t>(var)] = static_cast<std::int64_t>(y.size());
    if (y.size() > kNumTraits + 1) {
      const Eigen::Index n = static_cast<Eigen::Index>(y.size());
      MatrixD X(n, kNumTraits + 1);
      VectorD Y(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        for (int k = 0; k < kNumTraits; ++k) X(i, k + 1) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        Y(i) = y[static_cast<std::size_t>(i)];
      }
      MatrixD xtx = X.transpose() * X;
      VectorD beta = xtx.ldlt().solve(X.transpose() * Y);
      double rss = (Y - X * beta).squaredNorm();
      double sigma2 = rss / static_cast<double>(n - (kNumTraits + 1));
      MatrixD cov = sigma2 * xtx.inverse();
      for (int k = 0; k < kNumTraits; ++k) {
        report.coef(k, var) = beta(k + 1);
        report.stderr_(k, var) = std::sqrt(std::max(0.0, cov(k + 1, k + 1)));
      }
    }
    if (event_n > 0 && other_n > 0 && std::abs(other_sum) > 1e-12) {
      report.event_ratio(var) = (event_sum / static_cast<double>(event_n)) /
                                (other_sum / static_cast<double>(other_n));
      report.has_event_ratio[static_cast<std::size_t>(var)] = true;
    }
  }
  return report;
}

std::string oracle_to_csv(const EffectOracleReport& report) {
  std::string out = "variable,weeks";
  for (int k = 0; k < kNumTraits; ++k) {
    out += std::string(",coef_") + trait_name(k) + ",stderr_" + trait_name(k);
  }
  out += ",event_ratio\n";
  for (int var = 0; var < kNumVariables; ++var) {
    out += std::string(variable_spec(var).name);
    out += ',';
    out += std::to_string(report.week_count[static_cast<std::size_t>(var)]);
    for (int k = 0; k < kNumTraits; ++k) {
      out += ',';
      out += io::format_double(report.coef(k, var));
      out += ',';
      out += io::format_double(report.stderr_(k, var));
    }
    out += ',';
    out += report.has_event_ratio[static_cast<std::size_t>(var)]
               ? io::format_double(report.event_ratio(var))
               : std::string("na");
    out += '\n';
  }
  return out;
}

std::string latents_to_csv(const std::vector<SubjectLatent>& latents) {
  std::string out = "subject_id,age,sex,fitness,activity_level\n";
  for (const auto& s : latents) {
    out += std::to_string(s.subject_id);
    out += ',';
    out += io::format_double(s.age);
    out += ',';
    out += std::to_string(s.sex);
    out += ',';
    out += io::format_double(s.fitness);
    out += ',';
    out += io::format_double(s.activity_level);
    out += '\n';
  }
  return out;
}

}  // namespace wbm::synthgen
