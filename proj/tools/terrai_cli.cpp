// terrai: command-line driver for the nitrogen-prescription pipeline.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "terrai/common.hpp"
#include "terrai/pipeline.hpp"

namespace {

using namespace terrai;
namespace pl = terrai::pipeline;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string one_line(std::string s) {
  for (auto& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
    if (ch == '"') ch = '\'';
  }
  return s;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << "terrai: error kind=" << kind << " exit=" << code << " message=\"" << one_line(message) << "\"\n";
  return code;
}

struct Options {
  std::string config_path;
  std::string output_dir;
  std::vector<std::string> variants;
  std::optional<double> power_watts;
  bool quiet = false;
};

// Remaining "--a.b value" / "--a.b=value" pairs become config overrides.
void apply_extras(nlohmann::json& j, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() == 2) throw ConfigError("unexpected argument '" + arg + "'");
    std::string key = arg.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("override --" + key + " needs a value");
      value = extras[++i];
    }
    pl::apply_override(j, key, value);
  }
}

pl::RunConfig resolve_config(const Options& opt, const std::vector<std::string>& extras) {
  nlohmann::json j = opt.config_path.empty() ? pl::default_config_json() : pl::load_config_json(opt.config_path);
  apply_extras(j, extras);
  if (!opt.output_dir.empty()) j["output_dir"] = opt.output_dir;
  return pl::config_from_json(j);
}

std::vector<std::string> selected_variants(const pl::RunConfig& config, const Options& opt) {
  return opt.variants.empty() ? config.variants : opt.variants;
}

void print_metrics(const std::string& label, const evaluate::MetricReport& r) {
  std::printf("%s rmse=%.4f mape=%.3f smape=%.3f items=%zu pixels=%zu\n", label.c_str(), r.rmse, r.mape, r.smape,
              r.n_items, r.n_pixels);
}

void do_synth(const pl::RunConfig& c) {
  const auto m = pl::run_synth(c);
  std::printf("synth: %zu scenes -> %s\n", m.scenes.size(), pl::Paths{c.output_dir}.dataset().c_str());
}

void do_prep(const pl::RunConfig& c) {
  const auto s = pl::run_prep(c);
  std::printf("prep: kept %zu scenes, dropped %zu; patches %zu (train %zu, validation %zu, test %zu)\n",
              s.kept_scenes.size(), s.dropped_scenes.size(), s.patches, s.train, s.validation, s.test);
}

void do_train(const pl::RunConfig& c, const Options& opt) {
  const auto data = pl::load_prepared(c);
  for (const auto& v : selected_variants(c, opt)) {
    const int max_epochs = c.train.max_epochs;
    auto progress = [&](const train::EpochRecord& e) {
      if (opt.quiet) return;
      std::printf("train %s epoch %d/%d train_loss=%.6f validation_loss=%.6f\n", v.c_str(), e.epoch, max_epochs,
                  e.train_loss, e.validation_loss);
      std::fflush(stdout);
    };
    const auto r = pl::run_train(c, v, data, progress);
    std::printf("train %s: %zu parameters, stopped by %s after %zu epochs, best epoch %d (validation %.6f), %.1f s\n",
                v.c_str(), r.parameter_count, train::to_string(r.stop_reason).c_str(), r.epochs.size(), r.best_epoch,
                r.best_validation_loss, r.wall_seconds);
  }
}

void do_eval(const pl::RunConfig& c, const Options& opt) {
  for (const auto& v : selected_variants(c, opt)) {
    const auto r = pl::run_eval(c, v);
    print_metrics("eval " + v + " patch", r.patch);
    print_metrics("eval " + v + " map", r.map);
    print_metrics("eval " + v + " mean-predictor", r.mean_predictor_patch);
  }
}

void do_render(const pl::RunConfig& c, const Options& opt) {
  for (const auto& v : selected_variants(c, opt)) {
    for (const auto& p : pl::run_render(c, v)) std::printf("render %s: %s\n", v.c_str(), p.c_str());
  }
}

void do_green(const pl::RunConfig& c, const Options& opt) {
  const auto report = pl::run_green_report(c, opt.power_watts);
  std::cout << green::green_report_csv(report);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"terrai: synthetic soil-health rasters, patch U-Net training and energy reporting"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opt.config_path, "JSON config file merged over the defaults");
    cmd->add_option("--output-dir", opt.output_dir,
                    "Output root (default: config output_dir, else $TERRAI_OUTPUT_ROOT, else ./terrai-run)");
    cmd->allow_extras();
    cmd->footer(
        "Any other --section.key VALUE pair overrides a config entry, e.g. --train.max_epochs 20 "
        "--dataset.scenes 35 --seed 7. Values are parsed as JSON, falling back to strings.");
  };
  auto add_variants = [&](CLI::App* cmd) {
    cmd->add_option("--variant", opt.variants, "Width variant(s): small, baseline, large (default: config variants)");
  };

  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic parcel dataset");
  auto* prep_cmd = app.add_subcommand("prep", "Outlier removal, patch extraction, split and standardization");
  auto* train_cmd = app.add_subcommand("train", "Train U-Net variants with early stopping");
  auto* eval_cmd = app.add_subcommand("eval", "Patch and map metrics on the test parcels");
  auto* render_cmd = app.add_subcommand("render", "Actual/predicted PGM images for test maps");
  auto* green_cmd = app.add_subcommand("green-report", "Energy, savings and CO2e table across variants");
  auto* run_cmd = app.add_subcommand("run", "synth, prep, train, eval, render and green-report in sequence");
  for (auto* cmd : {synth_cmd, prep_cmd, train_cmd, eval_cmd, render_cmd, green_cmd, run_cmd}) add_common(cmd);
  for (auto* cmd : {train_cmd, eval_cmd, render_cmd, run_cmd}) add_variants(cmd);
  for (auto* cmd : {train_cmd, run_cmd}) cmd->add_flag("--quiet", opt.quiet, "Suppress per-epoch progress lines");
  for (auto* cmd : {green_cmd, run_cmd}) {
    cmd->add_option("--power-watts", opt.power_watts, "Re-estimate energy as wall time x this power (W)")
        ->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kExitUsage);
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const auto config = resolve_config(opt, cmd->remaining());
    const std::string name = cmd->get_name();
    if (name == "synth") do_synth(config);
    else if (name == "prep") do_prep(config);
    else if (name == "train") do_train(config, opt);
    else if (name == "eval") do_eval(config, opt);
    else if (name == "render") do_render(config, opt);
    else if (name == "green-report") do_green(config, opt);
    else {
      do_synth(config);
      do_prep(config);
      do_train(config, opt);
      do_eval(config, opt);
      do_render(config, opt);
      do_green(config, opt);
    }
  } catch (const ConfigError& e) {
    return fail("config", e.what(), kExitUsage);
  } catch (const DependencyError& e) {
    return fail("dependency", e.what(), kExitUsage);
  } catch (const IngestError& e) {
    return fail("ingest", e.what(), kExitRuntime);
  } catch (const ShapeError& e) {
    return fail("shape", e.what(), kExitRuntime);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), kExitRuntime);
  }
  return kExitOk;
}
