#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace wbm {

inline constexpr int kNumVariables = 27;
inline constexpr int kHoursPerWeek = 168;
inline constexpr int kHoursPerDay = 24;
inline constexpr int kDenseWidth = 2 * kNumVariables;  // values then masks

enum class Category : std::uint8_t { Activity, Cardiovascular, Vitals, Mobility, Body, Fitness };

enum class HourlyAgg : std::uint8_t { Sum, Mean };

enum class SamplingClass : std::uint8_t { SubHourly, Daily, FewHourly, Weekly, Opportunistic };

struct VariableSpec {
  int variable_id;
  std::string_view name;
  Category category;
  HourlyAgg hourly_aggregation;
  SamplingClass sampling_class;
  // Fraction of subject-weeks expected to contain at least one observation;
  // used as the generator's default weekly observation rate.
  double weekly_rate;
  bool overnight_only;  // emitted only during hours 0-6 of each day
};

// Canonical variable ids. Order is fixed; grid columns and file formats
// depend on it.
enum VarId : int {
  kFlightsClimbedPhone = 0,
  kFlightsClimbedWatch = 1,
  kActiveEnergy = 2,
  kBasalEnergy = 3,
  kStepCountPhone = 4,
  kStepCountWatch = 5,
  kExerciseMinutes = 6,
  kStandTime = 7,
  kRestingHeartRate = 8,
  kWalkingHeartRate = 9,
  kHeartRate = 10,
  kHeartRateVariability = 11,
  kRespiratoryRate = 12,
  kBloodOxygen = 13,
  kWristTemperature = 14,
  kWalkingSpeed = 15,
  kWalkingStepLength = 16,
  kWalkingDoubleSupport = 17,
  kWalkingAsymmetry = 18,
  kStairAscentSpeed = 19,
  kStairDescentSpeed = 20,
  kFallCount = 21,
  kWalkingSteadiness = 22,
  kBodyMass = 23,
  kBodyMassIndex = 24,
  kVo2Max = 25,
  kSixMinuteWalk = 26,
};

// The variable a week must carry on enough distinct days to count as worn.
inline constexpr int kWearProxyVariable = kHeartRate;

const std::array<VariableSpec, kNumVariables>& variable_registry();

const VariableSpec& variable_spec(int variable_id);

// -1 when the name is unknown.
int variable_id_by_name(std::string_view name);

}  // namespace wbm
