#include "wbm/variables.hpp"

#include <stdexcept>
#include <string>

namespace wbm {

namespace {

constexpr std::array<VariableSpec, kNumVariables> kRegistry = {{
    {kFlightsClimbedPhone, "flights_climbed_phone", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.6828, false},
    {kFlightsClimbedWatch, "flights_climbed_watch", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.6506, false},
    {kActiveEnergy, "active_energy", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.9311, false},
    {kBasalEnergy, "basal_energy", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.9521, false},
    {kStepCountPhone, "step_count_phone", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.9834, false},
    {kStepCountWatch, "step_count_watch", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.9067, false},
    {kExerciseMinutes, "exercise_minutes", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.8635, false},
    {kStandTime, "stand_time", Category::Activity, HourlyAgg::Sum, SamplingClass::SubHourly, 0.9042, false},
    {kRestingHeartRate, "resting_heart_rate", Category::Cardiovascular, HourlyAgg::Mean, SamplingClass::Daily, 0.8845, false},
    {kWalkingHeartRate, "walking_heart_rate", Category::Cardiovascular, HourlyAgg::Mean, SamplingClass::Daily, 0.8427, false},
    {kHeartRate, "heart_rate", Category::Cardiovascular, HourlyAgg::Mean, SamplingClass::SubHourly, 0.9176, false},
    {kHeartRateVariability, "heart_rate_variability", Category::Cardiovascular, HourlyAgg::Mean, SamplingClass::FewHourly, 0.8856, false},
    {kRespiratoryRate, "respiratory_rate", Category::Vitals, HourlyAgg::Mean, SamplingClass::SubHourly, 0.3521, true},
    {kBloodOxygen, "blood_oxygen", Category::Vitals, HourlyAgg::Mean, SamplingClass::FewHourly, 0.4431, false},
    {kWristTemperature, "wrist_temperature", Category::Vitals, HourlyAgg::Mean, SamplingClass::Daily, 0.0312, true},
    {kWalkingSpeed, "walking_speed", Category::Mobility, HourlyAgg::Mean, SamplingClass::SubHourly, 0.8459, false},
    {kWalkingStepLength, "walking_step_length", Category::Mobility, HourlyAgg::Mean, SamplingClass::SubHourly, 0.8453, false},
    {kWalkingDoubleSupport, "walking_double_support", Category::Mobility, HourlyAgg::Mean, SamplingClass::SubHourly, 0.8323, false},
    {kWalkingAsymmetry, "walking_asymmetry", Category::Mobility, HourlyAgg::Mean, SamplingClass::SubHourly, 0.6978, false},
    {kStairAscentSpeed, "stair_ascent_speed", Category::Mobility, HourlyAgg::Mean, SamplingClass::SubHourly, 0.4164, false},
    {kStairDescentSpeed, "stair_descent_speed", Category::Mobility, HourlyAgg::Mean, SamplingClass::SubHourly, 0.4172, false},
    {kFallCount, "fall_count", Category::Mobility, HourlyAgg::Sum, SamplingClass::Opportunistic, 0.0004, false},
    {kWalkingSteadiness, "walking_steadiness", Category::Mobility, HourlyAgg::Mean, SamplingClass::Weekly, 0.0964, false},
    {kBodyMass, "body_mass", Category::Body, HourlyAgg::Mean, SamplingClass::Opportunistic, 0.1093, false},
    {kBodyMassIndex, "body_mass_index", Category::Body, HourlyAgg::Mean, SamplingClass::Opportunistic, 0.0797, false},
    {kVo2Max, "vo2_max", Category::Fitness, HourlyAgg::Mean, SamplingClass::Opportunistic, 0.1607, false},
    {kSixMinuteWalk, "six_minute_walk", Category::Fitness, HourlyAgg::Mean, SamplingClass::Weekly, 0.0893, false},
}};

}  // namespace

const std::array<VariableSpec, kNumVariables>& variable_registry() { return kRegistry; }

const VariableSpec& variable_spec(int variable_id) {
  if (variable_id < 0 || variable_id >= kNumVariables) {
    throw std::out_of_range("variable_id out of range: " + std::to_string(variable_id));
  }
  return kRegistry[static_cast<std::size_t>(variable_id)];
}

int variable_id_by_name(std::string_view name) {
  for (const auto& spec : kRegistry) {
    if (spec.name == name) return spec.variable_id;
  }
  return -1;
}

}  // namespace wbm
