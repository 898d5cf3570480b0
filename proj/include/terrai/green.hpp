#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace terrai::green {

inline constexpr double kJoulesPerKwh = 3'600'000.0;

enum class EnergySourceKind { measured, estimated };

struct EnergySample {
  std::string run_id;
  double joules = 0.0;
  EnergySourceKind source = EnergySourceKind::measured;
  double wall_seconds = 0.0;
  std::optional<double> assumed_power_watts;

  static EnergySample measured(std::string run_id, double joules, double wall_seconds = 0.0);
  /// joules = wall_seconds × power_watts
  static EnergySample estimated(std::string run_id, double wall_seconds, double power_watts);
};

/// Grid-average greenhouse-gas intensity of electricity.
struct EmissionFactor {
  double kg_co2e_per_kwh = 0.166;
  std::string region_year_label = "EU grid 2023";
};

double joules_to_kwh(double joules);
/// |baseline - other|
double delta_energy(double baseline_kwh, double other_kwh);
/// Grams of CO2e for an energy amount.
double co2_equivalent(double delta_kwh, const EmissionFactor& ef);
/// Percentage of baseline energy saved by the variant.
double efficiency_gain(double baseline_joules, double variant_joules);

/// Where a training run's joules come from.
class EnergySource {
 public:
  virtual ~EnergySource() = default;
  virtual void start() = 0;
  virtual EnergySample stop(const std::string& run_id) = 0;
};

/// Wall time × a configured device power; reports are labeled "estimated".
class WallClockEstimator final : public EnergySource {
 public:
  explicit WallClockEstimator(double power_watts);
  void start() override;
  EnergySample stop(const std::string& run_id) override;

 private:
  double power_watts_;
  std::chrono::steady_clock::time_point started_{};
};

/// Joules supplied from an external meter once the run has finished.
class MeasuredEnergy final : public EnergySource {
 public:
  explicit MeasuredEnergy(double joules = 0.0) : joules_(joules) {}
  void set_joules(double joules) { joules_ = joules; }
  void start() override;
  EnergySample stop(const std::string& run_id) override;

 private:
  double joules_;
  std::chrono::steady_clock::time_point started_{};
};

struct VariantEnergy {
  std::string variant;
  std::size_t parameter_count = 0;
  EnergySample sample;
};

struct GreenRow {
  std::string variant;
  std::size_t parameter_count = 0;
  double joules = 0.0;
  double kwh = 0.0;
  EnergySourceKind source = EnergySourceKind::measured;
  std::optional<std::string> compared_with;      // next-larger variant
  std::optional<double> annual_savings_kwh;      // one re-training per year
  std::optional<double> co2e_grams;
  std::optional<double> efficiency_gain_percent;  // against the baseline row
};

struct GreenReport {
  EmissionFactor emission_factor;
  std::string reference_variant = "baseline";
  std::vector<GreenRow> rows;  // ascending parameter count
};

/// Rows sorted by parameter count; each row's savings are measured against
/// the next-larger variant, efficiency gains against `reference_variant`.
GreenReport build_green_report(std::vector<VariantEnergy> runs, const EmissionFactor& ef = {},
                               const std::string& reference_variant = "baseline");

std::string green_report_json(const GreenReport& report);
std::string green_report_csv(const GreenReport& report);
void write_green_report(const GreenReport& report, const std::filesystem::path& json_path,
                        const std::filesystem::path& csv_path);

}  // namespace terrai::green
