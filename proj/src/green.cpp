#include "terrai/green.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "terrai/common.hpp"

namespace terrai::green {

EnergySample EnergySample::measured(std::string run_id, double joules, double wall_seconds) {
  if (!(joules >= 0.0)) throw ConfigError("measured energy must be nonnegative");
  return EnergySample{std::move(run_id), joules, EnergySourceKind::measured, wall_seconds, std::nullopt};
}

EnergySample EnergySample::estimated(std::string run_id, double wall_seconds, double power_watts) {
  if (!(power_watts > 0.0)) throw ConfigError("assumed power must be positive");
  if (!(wall_seconds >= 0.0)) throw ConfigError("wall time must be nonnegative");
  return EnergySample{std::move(run_id), wall_seconds * power_watts, EnergySourceKind::estimated, wall_seconds,
                      power_watts};
}

double joules_to_kwh(double joules) {
  if (!(joules >= 0.0)) throw ConfigError("joules_to_kwh: energy must be nonnegative");
  return joules / kJoulesPerKwh;
}

double delta_energy(double baseline_kwh, double other_kwh) {
  if (!(baseline_kwh >= 0.0 && other_kwh >= 0.0)) throw ConfigError("delta_energy: energies must be nonnegative");
  return std::abs(baseline_kwh - other_kwh);
}

double co2_equivalent(double delta_kwh, const EmissionFactor& ef) {
  if (!(delta_kwh >= 0.0)) throw ConfigError("co2_equivalent: energy must be nonnegative");
  if (!(ef.kg_co2e_per_kwh > 0.0)) throw ConfigError("co2_equivalent: emission factor must be positive");
  return delta_kwh * ef.kg_co2e_per_kwh * 1000.0;
}

double efficiency_gain(double baseline_joules, double variant_joules) {
  if (!(baseline_joules > 0.0)) throw ConfigError("efficiency_gain: baseline energy must be positive");
  return 100.0 * (baseline_joules - variant_joules) / baseline_joules;
}

WallClockEstimator::WallClockEstimator(double power_watts) : power_watts_(power_watts) {
  if (!(power_watts > 0.0)) throw ConfigError("--power-watts must be positive");
}

void WallClockEstimator::start() { started_ = std::chrono::steady_clock::now(); }

EnergySample WallClockEstimator::stop(const std::string& run_id) {
  const std::chrono::duration<double> wall = std::chrono::steady_clock::now() - started_;
  return EnergySample::estimated(run_id, wall.count(), power_watts_);
}

void MeasuredEnergy::start() { started_ = std::chrono::steady_clock::now(); }

EnergySample MeasuredEnergy::stop(const std::string& run_id) {
  const std::chrono::duration<double> wall = std::chrono::steady_clock::now() - started_;
  return EnergySample::measured(run_id, joules_, wall.count());
}

GreenReport build_green_report(std::vector<VariantEnergy> runs, const EmissionFactor& ef,
                               const std::string& reference_variant) {
  if (!(ef.kg_co2e_per_kwh > 0.0)) throw ConfigError("emission factor must be positive");
  std::stable_sort(runs.begin(), runs.end(),
                   [](const auto& a, const auto& b) { return a.parameter_count < b.parameter_count; });
  GreenReport report;
  report.emission_factor = ef;
  report.reference_variant = reference_variant;
  const auto ref = std::find_if(runs.begin(), runs.end(), [&](const auto& r) { return r.variant == reference_variant; });
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& run = runs[i];
    GreenRow row;
    row.variant = run.variant;
    row.parameter_count = run.parameter_count;
    row.joules = run.sample.joules;
    row.kwh = joules_to_kwh(run.sample.joules);
    row.source = run.sample.source;
    if (i + 1 < runs.size()) {
      const auto& larger = runs[i + 1];
      row.compared_with = larger.variant;
      row.annual_savings_kwh = delta_energy(joules_to_kwh(larger.sample.joules), row.kwh);
      row.co2e_grams = co2_equivalent(*row.annual_savings_kwh, ef);
    }
    if (ref != runs.end() && ref->sample.joules > 0.0) {
      row.efficiency_gain_percent = efficiency_gain(ref->sample.joules, run.sample.joules);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

const char* source_name(EnergySourceKind k) { return k == EnergySourceKind::measured ? "measured" : "estimated"; }

}  // namespace

std::string green_report_json(const GreenReport& report) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["emission_factor_kg_per_kwh"] = report.emission_factor.kg_co2e_per_kwh;
  j["emission_factor_label"] = report.emission_factor.region_year_label;
  j["reference_variant"] = report.reference_variant;
  j["retrainings_per_year"] = 1;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    nlohmann::ordered_json row;
    row["variant"] = r.variant;
    row["parameter_count"] = r.parameter_count;
    row["energy_source"] = source_name(r.source);
    row["energy_joules"] = r.joules;
    row["energy_kwh"] = r.kwh;
    row["compared_with"] = r.compared_with ? nlohmann::ordered_json(*r.compared_with) : nlohmann::ordered_json(nullptr);
    row["annual_savings_kwh"] = r.annual_savings_kwh ? nlohmann::ordered_json(*r.annual_savings_kwh) : nlohmann::ordered_json(nullptr);
    row["co2e_grams"] = r.co2e_grams ? nlohmann::ordered_json(*r.co2e_grams) : nlohmann::ordered_json(nullptr);
    row["efficiency_gain_percent"] =
        r.efficiency_gain_percent ? nlohmann::ordered_json(*r.efficiency_gain_percent) : nlohmann::ordered_json(nullptr);
    rows.push_back(std::move(row));
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

std::string green_report_csv(const GreenReport& report) {
  std::ostringstream out;
  out << "variant,parameter_count,energy_source,energy_joules,energy_kwh,compared_with,annual_savings_kwh,"
         "co2e_grams,efficiency_gain_percent\n";
  for (const auto& r : report.rows) {
    out << r.variant << ',' << r.parameter_count << ',' << source_name(r.source) << ',' << fmt("%.3f", r.joules)
        << ',' << fmt("%.6e", r.kwh) << ',' << r.compared_with.value_or("") << ','
        << (r.annual_savings_kwh ? fmt("%.6e", *r.annual_savings_kwh) : "") << ','
        << (r.co2e_grams ? fmt("%.4f", *r.co2e_grams) : "") << ','
        << (r.efficiency_gain_percent ? fmt("%.2f", *r.efficiency_gain_percent) : "") << '\n';
  }
  return out.str();
}

void write_green_report(const GreenReport& report, const std::filesystem::path& json_path,
                        const std::filesystem::path& csv_path) {
  std::ofstream j(json_path, std::ios::trunc);
  std::ofstream c(csv_path, std::ios::trunc);
  if (!j || !c) throw Error("cannot write green report");
  j << green_report_json(report);
  c << green_report_csv(report);
}

}  // namespace terrai::green
