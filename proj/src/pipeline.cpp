#include "terrai/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <set>

#include "terrai/common.hpp"

namespace terrai::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string scale_name(preprocess::ScaleMode m) {
  return m == preprocess::ScaleMode::stddev ? "stddev" : "variance";
}

preprocess::ScaleMode scale_from_name(const std::string& s) {
  if (s == "stddev") return preprocess::ScaleMode::stddev;
  if (s == "variance") return preprocess::ScaleMode::variance;
  throw ConfigError("preprocess.scale must be 'stddev' or 'variance', got '" + s + "'");
}

// Keys whose children are free-form (variant name -> value).
bool is_open_map(const std::string& path) { return path == "energy.measured_joules"; }

const char* type_label(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_unsigned()) return "nonnegative integer";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

bool compatible(const json& expected, const json& got) {
  if (expected.is_boolean()) return got.is_boolean();
  if (expected.is_number_unsigned()) return got.is_number_unsigned() || (got.is_number_integer() && got.get<long long>() >= 0);
  if (expected.is_number_integer()) return got.is_number_integer();
  if (expected.is_number()) return got.is_number();
  if (expected.is_string()) return got.is_string();
  if (expected.is_array()) return got.is_array();
  if (expected.is_object()) return got.is_object();
  return true;
}

void check_shape(const json& defaults, const json& user, const std::string& path) {
  if (!compatible(defaults, user)) {
    throw ConfigError("config key '" + path + "' expects " + type_label(defaults) + ", got " + type_label(user));
  }
  if (!user.is_object() || is_open_map(path)) {
    if (is_open_map(path)) {
      for (const auto& [k, v] : user.items()) {
        if (!v.is_number()) throw ConfigError("config key '" + path + "." + k + "' expects number");
      }
    }
    return;
  }
  for (const auto& [k, v] : user.items()) {
    const std::string child = path.empty() ? k : path + "." + k;
    if (!defaults.contains(k)) throw ConfigError("unknown config key '" + child + "'");
    check_shape(defaults.at(k), v, child);
  }
}

void merge_into(json& base, const json& overlay) {
  for (const auto& [k, v] : overlay.items()) {
    if (v.is_object() && base.contains(k) && base[k].is_object()) {
      merge_into(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

json read_json(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing " + what + " " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw IngestError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_checksum(const std::string& found, const std::string& expected, const std::string& artifact) {
  if (found != expected) {
    throw DependencyError(artifact + " was produced under a different configuration (checksum " + found +
                          ", expected " + expected + "); rerun the upstream stage");
  }
}

void require_variant(const RunConfig& config, const std::string& variant) {
  if (std::find(config.variants.begin(), config.variants.end(), variant) == config.variants.end()) {
    throw ConfigError("variant '" + variant + "' is not listed in config.variants");
  }
  (void)unet::WidthConfig::from_name(variant);
}

nlohmann::ordered_json metrics_json(const evaluate::MetricReport& r) {
  return {{"scope", evaluate::to_string(r.scope)},
          {"rmse", r.rmse},
          {"mape", r.mape},
          {"smape", r.smape},
          {"n_items", r.n_items},
          {"n_pixels", r.n_pixels},
          {"excluded_zero_targets", r.excluded_zero_targets}};
}

train::TrainConfig train_config_for(const RunConfig& config, const std::string& variant) {
  auto tc = config.train;
  tc.seed = derive_seed(config.seed, "train:" + variant);
  return tc;
}

}  // namespace

json default_config_json() {
  RunConfig c;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) c.output_dir = root;
  return config_to_json(c);
}

json config_to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["dataset"] = {{"scenes", c.dataset.scenes},
                  {"height", c.dataset.height},
                  {"width", c.dataset.width},
                  {"correlation_length", c.dataset.correlation_length},
                  {"label_noise_sd", c.dataset.label_noise_sd},
                  {"boundary_irregularity", c.dataset.boundary_irregularity},
                  {"phase", c.dataset.phase}};
  j["preprocess"] = {{"iqr_multiplier", c.preprocess.iqr_multiplier},
                     {"bins", c.preprocess.bins},
                     {"ratios",
                      {{"train", c.preprocess.ratios.train},
                       {"validation", c.preprocess.ratios.validation},
                       {"test", c.preprocess.ratios.test}}},
                     {"scale", scale_name(c.preprocess.scale)}};
  j["variants"] = c.variants;
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"max_epochs", c.train.max_epochs},
                {"patience", c.train.patience},
                {"batch_size", c.train.batch_size},
                {"adam_beta1", c.train.adam_beta1},
                {"adam_beta2", c.train.adam_beta2},
                {"adam_epsilon", c.train.adam_epsilon},
                {"augment", c.train.augment},
                {"train_patches_per_epoch", c.train.train_patches_per_epoch},
                {"validation_patches", c.train.validation_patches}};
  j["energy"] = {{"mode", c.energy.mode},
                 {"power_watts", c.energy.power_watts},
                 {"measured_joules", json(c.energy.measured_joules)}};
  if (c.energy.measured_joules.empty()) j["energy"]["measured_joules"] = json::object();
  j["emission_factor"] = {{"kg_co2e_per_kwh", c.emission_factor.kg_co2e_per_kwh},
                          {"region_year_label", c.emission_factor.region_year_label}};
  j["reference_variant"] = c.reference_variant;
  j["render"] = {{"scenes", c.render.scenes}};
  return j;
}

RunConfig config_from_json(const json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  const json defaults = default_config_json();
  check_shape(defaults, user, "");
  json j = defaults;
  merge_into(j, user);

  RunConfig c;
  try {
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != kConfigSchemaVersion) {
      throw ConfigError("unsupported config schema_version " + std::to_string(c.schema_version));
    }
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    const auto& d = j.at("dataset");
    c.dataset.scenes = d.at("scenes").get<std::size_t>();
    c.dataset.height = d.at("height").get<std::size_t>();
    c.dataset.width = d.at("width").get<std::size_t>();
    c.dataset.correlation_length = d.at("correlation_length").get<double>();
    c.dataset.label_noise_sd = d.at("label_noise_sd").get<double>();
    c.dataset.boundary_irregularity = d.at("boundary_irregularity").get<double>();
    c.dataset.phase = d.at("phase").get<int>();
    const auto& p = j.at("preprocess");
    c.preprocess.iqr_multiplier = p.at("iqr_multiplier").get<double>();
    c.preprocess.bins = p.at("bins").get<std::size_t>();
    c.preprocess.ratios = {p.at("ratios").at("train").get<double>(), p.at("ratios").at("validation").get<double>(),
                           p.at("ratios").at("test").get<double>()};
    c.preprocess.scale = scale_from_name(p.at("scale").get<std::string>());
    c.variants = j.at("variants").get<std::vector<std::string>>();
    const auto& t = j.at("train");
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.max_epochs = t.at("max_epochs").get<int>();
    c.train.patience = t.at("patience").get<int>();
    c.train.batch_size = t.at("batch_size").get<std::size_t>();
    c.train.adam_beta1 = t.at("adam_beta1").get<double>();
    c.train.adam_beta2 = t.at("adam_beta2").get<double>();
    c.train.adam_epsilon = t.at("adam_epsilon").get<double>();
    c.train.augment = t.at("augment").get<bool>();
    c.train.train_patches_per_epoch = t.at("train_patches_per_epoch").get<std::size_t>();
    c.train.validation_patches = t.at("validation_patches").get<std::size_t>();
    const auto& e = j.at("energy");
    c.energy.mode = e.at("mode").get<std::string>();
    c.energy.power_watts = e.at("power_watts").get<double>();
    c.energy.measured_joules = e.at("measured_joules").get<std::map<std::string, double>>();
    c.emission_factor.kg_co2e_per_kwh = j.at("emission_factor").at("kg_co2e_per_kwh").get<double>();
    c.emission_factor.region_year_label = j.at("emission_factor").at("region_year_label").get<std::string>();
    c.reference_variant = j.at("reference_variant").get<std::string>();
    c.render.scenes = j.at("render").at("scenes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  if (c.dataset.scenes < 4) throw ConfigError("dataset.scenes must be at least 4");
  if (c.dataset.height < preprocess::kPatchSize || c.dataset.width < preprocess::kPatchSize) {
    throw ConfigError("dataset.height and dataset.width must be at least 8");
  }
  if (c.preprocess.bins == 0) throw ConfigError("preprocess.bins must be positive");
  if (!(c.preprocess.iqr_multiplier >= 0.0)) throw ConfigError("preprocess.iqr_multiplier must be nonnegative");
  const auto& r = c.preprocess.ratios;
  if (r.train <= 0.0 || r.validation <= 0.0 || r.test <= 0.0 ||
      std::abs(r.train + r.validation + r.test - 1.0) > 1e-9) {
    throw ConfigError("preprocess.ratios must be positive and sum to 1");
  }
  if (c.variants.empty()) throw ConfigError("variants must not be empty");
  std::set<std::string> seen;
  for (const auto& v : c.variants) {
    (void)unet::WidthConfig::from_name(v);
    if (!seen.insert(v).second) throw ConfigError("variant '" + v + "' listed twice");
  }
  c.train.validate();
  if (c.energy.mode != "estimated" && c.energy.mode != "measured") {
    throw ConfigError("energy.mode must be 'estimated' or 'measured'");
  }
  if (!(c.energy.power_watts > 0.0)) throw ConfigError("energy.power_watts must be positive");
  if (!(c.emission_factor.kg_co2e_per_kwh >= 0.0)) throw ConfigError("emission_factor.kg_co2e_per_kwh must be nonnegative");
  // Catches bad dataset fields before any file is written.
  synth::FieldSpec probe;
  probe.height = c.dataset.height;
  probe.width = c.dataset.width;
  probe.correlation_length = c.dataset.correlation_length;
  probe.label_noise_sd = c.dataset.label_noise_sd;
  probe.boundary_irregularity = c.dataset.boundary_irregularity;
  probe.phase = c.dataset.phase;
  probe.validate();
  return c;
}

json load_config_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json user;
  try {
    in >> user;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!user.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  check_shape(default_config_json(), user, "");
  json j = default_config_json();
  merge_into(j, user);
  return j;
}

void apply_override(json& config, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw ConfigError("empty override key");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed override key '" + dotted_key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override key '" + dotted_key + "' descends into a non-object");
    start = dot + 1;
  }
}

std::string stage_checksum(const RunConfig& config, const std::string& stage, const std::string& variant) {
  const json full = config_to_json(config);
  json scope;
  scope["seed"] = full["seed"];
  scope["dataset"] = full["dataset"];
  if (stage == "synth") return checksum_string(scope.dump());
  scope["preprocess"] = full["preprocess"];
  if (stage == "prep") return checksum_string(scope.dump());
  if (stage == "train" || stage == "eval") {
    if (variant.empty()) throw ConfigError("stage '" + stage + "' checksum needs a variant");
    scope["train"] = full["train"];
    scope["variant"] = variant;
    return checksum_string(scope.dump());
  }
  throw ConfigError("unknown stage '" + stage + "'");
}

// ---- stages -----------------------------------------------------------------

synth::DatasetManifest run_synth(const RunConfig& config) {
  auto specs = synth::default_specs(config.dataset.scenes, derive_seed(config.seed, "synth"), config.dataset.height,
                                    config.dataset.width);
  for (auto& s : specs) {
    s.correlation_length = config.dataset.correlation_length;
    s.label_noise_sd = config.dataset.label_noise_sd;
    s.boundary_irregularity = config.dataset.boundary_irregularity;
    s.phase = config.dataset.phase;
  }
  const Paths paths{config.output_dir};
  fs::create_directories(paths.dataset());
  return synth::generate_dataset(specs, paths.dataset(), stage_checksum(config, "synth"));
}

namespace {

struct LoadedScenes {
  std::vector<synth::SyntheticScene> scenes;
  raster::ChannelSchema schema;
};

LoadedScenes load_checked_dataset(const RunConfig& config) {
  const Paths paths{config.output_dir};
  const auto manifest_path = paths.dataset() / "manifest.json";
  if (!fs::exists(manifest_path)) throw DependencyError("dataset not found at " + paths.dataset().string() + "; run synth first");
  const auto manifest = synth::read_manifest(manifest_path);
  require_checksum(manifest.config_checksum, stage_checksum(config, "synth"), "dataset");
  return {synth::load_dataset(paths.dataset()), manifest.schema};
}

}  // namespace

PrepSummary run_prep(const RunConfig& config) {
  auto loaded = load_checked_dataset(config);
  auto filtered = preprocess::iqr_filter(std::move(loaded.scenes), config.preprocess.iqr_multiplier);

  PrepSummary summary;
  summary.fences = filtered.fences;
  std::vector<preprocess::LabeledPatch> patches;
  for (const auto& s : filtered.kept) {
    summary.kept_scenes.push_back(s.stack.parcel_id);
    auto p = preprocess::extract_patches(s);
    std::move(p.begin(), p.end(), std::back_inserter(patches));
  }
  for (const auto& s : filtered.dropped) summary.dropped_scenes.push_back(s.stack.parcel_id);
  if (patches.empty()) throw ConfigError("no patches extracted from the dataset");

  const auto split = preprocess::stratified_split(patches, config.preprocess.ratios, derive_seed(config.seed, "split"),
                                                  config.preprocess.bins);
  const auto standardizer = preprocess::fit_standardizer(patches, split.train, config.preprocess.scale);

  summary.patches = patches.size();
  summary.train = split.train.size();
  summary.validation = split.validation.size();
  summary.test = split.test.size();
  summary.test_parcels = split.test_parcels;

  const Paths paths{config.output_dir};
  fs::create_directories(paths.prep());
  const auto sum = stage_checksum(config, "prep");
  preprocess::write_split(split, patches, paths.prep() / "split.json", sum);
  preprocess::write_standardizer(standardizer, paths.prep() / "standardizer.json", sum);

  nlohmann::ordered_json j;
  j["seed"] = config.seed;
  j["config_checksum"] = sum;
  j["kept_scenes"] = summary.kept_scenes;
  j["dropped_scenes"] = summary.dropped_scenes;
  j["fences"] = {{"q1", summary.fences.q1}, {"q3", summary.fences.q3}, {"lower", summary.fences.lower},
                 {"upper", summary.fences.upper}};
  j["counts"] = {{"patches", summary.patches}, {"train", summary.train}, {"validation", summary.validation},
                 {"test", summary.test}};
  j["test_parcels"] = summary.test_parcels;
  j["warnings"] = standardizer.warnings;
  write_json(paths.prep() / "summary.json", j);
  return summary;
}

PreparedData load_prepared(const RunConfig& config) {
  const Paths paths{config.output_dir};
  const auto summary_path = paths.prep() / "summary.json";
  if (!fs::exists(summary_path)) throw DependencyError("preprocessing output not found; run prep first");
  const json summary = read_json(summary_path, "prep summary");
  const auto expected = stage_checksum(config, "prep");
  require_checksum(summary.value("config_checksum", std::string{}), expected, "prep output");
  const json std_json = read_json(paths.prep() / "standardizer.json", "standardizer");
  require_checksum(std_json.value("config_checksum", std::string{}), expected, "standardizer");

  auto loaded = load_checked_dataset(config);
  PreparedData data;
  data.schema = loaded.schema;
  const auto kept = summary.at("kept_scenes").get<std::vector<std::string>>();
  for (const auto& id : kept) {
    auto it = std::find_if(loaded.scenes.begin(), loaded.scenes.end(),
                           [&](const synth::SyntheticScene& s) { return s.stack.parcel_id == id; });
    if (it == loaded.scenes.end()) throw DependencyError("prep output references missing scene " + id);
    data.scenes.push_back(std::move(*it));
  }
  for (const auto& s : data.scenes) {
    auto p = preprocess::extract_patches(s);
    std::move(p.begin(), p.end(), std::back_inserter(data.patches));
  }
  data.split = preprocess::read_split(paths.prep() / "split.json", data.patches);
  data.standardizer = preprocess::read_standardizer(paths.prep() / "standardizer.json");
  for (auto& p : data.patches) preprocess::apply_standardizer_inplace(data.standardizer, p);
  return data;
}

train::TrainReport run_train(const RunConfig& config, const std::string& variant, const train::ProgressFn& progress) {
  require_variant(config, variant);
  const auto data = load_prepared(config);
  return run_train(config, variant, data, progress);
}

train::TrainReport run_train(const RunConfig& config, const std::string& variant, const PreparedData& data,
                             const train::ProgressFn& progress) {
  require_variant(config, variant);
  auto model = unet::build_model(unet::WidthConfig::from_name(variant), derive_seed(config.seed, "model:" + variant),
                                 data.schema.count());

  std::unique_ptr<green::EnergySource> energy;
  if (config.energy.mode == "measured") {
    const auto it = config.energy.measured_joules.find(variant);
    if (it == config.energy.measured_joules.end()) {
      throw ConfigError("energy.mode is 'measured' but energy.measured_joules." + variant + " is not set");
    }
    energy = std::make_unique<green::MeasuredEnergy>(it->second);
  } else {
    energy = std::make_unique<green::WallClockEstimator>(config.energy.power_watts);
  }

  auto report = train::train_loop(model, data.patches, data.split, train_config_for(config, variant), *energy, progress);
  report.variant = variant;

  const Paths paths{config.output_dir};
  fs::create_directories(paths.train(variant));
  const auto sum = stage_checksum(config, "train", variant);
  report.checkpoint_checksum = unet::save_checkpoint(model, paths.checkpoint(variant), data.schema.checksum(), sum);
  report.checkpoint_path = (fs::path("train") / variant / "model").generic_string();
  report.config_checksum = sum;
  train::write_train_report(report, paths.train(variant) / "report.json");
  return report;
}

EvalResult run_eval(const RunConfig& config, const std::string& variant) {
  require_variant(config, variant);
  const Paths paths{config.output_dir};
  const auto stem = paths.checkpoint(variant);
  if (!fs::exists(stem.string() + ".model.json")) {
    throw DependencyError("no checkpoint for variant '" + variant + "'; run train first");
  }
  const auto sum = stage_checksum(config, "train", variant);
  const auto info = unet::read_checkpoint_info(stem);
  require_checksum(info.config_checksum, sum, "checkpoint for " + variant);
  const auto data = load_prepared(config);
  if (info.schema_checksum != data.schema.checksum()) {
    throw DependencyError("checkpoint input schema does not match the dataset schema");
  }
  const auto model = unet::load_checkpoint(stem);

  std::map<std::string, const synth::SyntheticScene*> by_id;
  for (const auto& s : data.scenes) by_id[s.stack.parcel_id] = &s;

  // Predictions in original units, grouped per parcel.
  std::map<std::string, std::vector<evaluate::PatchPrediction>> per_parcel;
  evaluate::MetricAccumulator patch_acc;
  evaluate::MetricAccumulator mean_acc;
  const double mean_label = data.standardizer.label_mean;
  const auto& test = data.split.test;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    const std::span<const std::size_t> idx(test.data() + start, std::min(kChunk, test.size() - start));
    const auto batch = train::make_batch(data.patches, idx);
    const auto out = model.predict(batch.input);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& origin = data.patches[idx[k]].origin;
      const auto& truth = by_id.at(origin.parcel_id)->truth;
      evaluate::PatchPrediction pred{origin, {}};
      for (std::size_t px = 0; px < preprocess::kPatchPixels; ++px) {
        // Rates are nonnegative, as are the labels.
        const double value =
            std::max(0.0, data.standardizer.label_to_original(out[k * preprocess::kPatchPixels + px]));
        pred.values[px] = static_cast<float>(value);
        const std::size_t r = origin.row + px / preprocess::kPatchSize;
        const std::size_t c = origin.col + px % preprocess::kPatchSize;
        if (!truth.mask(r, c)) continue;
        const double target = truth.grid(r, c);
        patch_acc.add(pred.values[px], target);
        mean_acc.add(mean_label, target);
      }
      per_parcel[origin.parcel_id].push_back(pred);
    }
  }
  patch_acc.add_items(test.size());
  mean_acc.add_items(test.size());

  EvalResult result;
  result.variant = variant;
  result.parameter_count = model.parameter_count();
  result.patch = patch_acc.finish(evaluate::Scope::patch);
  result.mean_predictor_patch = mean_acc.finish(evaluate::Scope::patch);

  fs::create_directories(paths.eval(variant) / "maps");
  evaluate::MetricAccumulator map_acc;
  for (const auto& [id, preds] : per_parcel) {
    const auto& scene = *by_id.at(id);
    MapResult m;
    m.parcel_id = id;
    m.truth = scene.truth;
    m.reconstruction = evaluate::reconstruct_map(preds, scene.truth.grid.height(), scene.truth.grid.width(), id,
                                                 scene.truth.phase);
    m.metrics = evaluate::map_metrics(m.reconstruction.map, m.truth);
    evaluate::accumulate_map(map_acc, m.reconstruction.map, m.truth);
    raster::write_prescription(paths.eval(variant) / "maps" / (id + ".pred"), m.reconstruction.map);
    result.per_map.push_back(std::move(m));
  }
  result.map = map_acc.finish(evaluate::Scope::map);

  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["seed"] = config.seed;
  j["config_checksum"] = sum;
  j["checkpoint_checksum"] = info.parameters_checksum;
  j["parameter_count"] = result.parameter_count;
  j["patch"] = metrics_json(result.patch);
  j["map"] = metrics_json(result.map);
  j["mean_predictor_patch"] = metrics_json(result.mean_predictor_patch);
  auto maps = nlohmann::ordered_json::array();
  for (const auto& m : result.per_map) {
    auto row = metrics_json(m.metrics);
    row["parcel_id"] = m.parcel_id;
    maps.push_back(row);
  }
  j["per_map"] = maps;
  write_json(paths.eval(variant) / "metrics.json", j);

  std::ofstream csv(paths.eval(variant) / "metrics.csv", std::ios::trunc);
  if (!csv) throw Error("cannot write " + (paths.eval(variant) / "metrics.csv").string());
  csv << evaluate::metrics_csv_header();
  csv << evaluate::metrics_csv_row(variant, result.patch);
  csv << evaluate::metrics_csv_row(variant, result.map);
  for (const auto& m : result.per_map) csv << evaluate::metrics_csv_row(variant + ":" + m.parcel_id, m.metrics);
  return result;
}

std::vector<fs::path> run_render(const RunConfig& config, const std::string& variant) {
  require_variant(config, variant);
  const Paths paths{config.output_dir};
  const auto metrics_path = paths.eval(variant) / "metrics.json";
  if (!fs::exists(metrics_path)) throw DependencyError("no evaluation for variant '" + variant + "'; run eval first");
  const json metrics = read_json(metrics_path, "metrics");
  require_checksum(metrics.value("config_checksum", std::string{}), stage_checksum(config, "train", variant),
                   "evaluation for " + variant);

  const auto manifest = synth::read_manifest(paths.dataset() / "manifest.json");
  std::vector<fs::path> written;
  fs::create_directories(paths.render(variant));
  std::size_t done = 0;
  for (const auto& row : metrics.at("per_map")) {
    if (done == config.render.scenes) break;
    const auto id = row.at("parcel_id").get<std::string>();
    const auto rec = std::find_if(manifest.scenes.begin(), manifest.scenes.end(),
                                  [&](const synth::SceneRecord& r) { return r.parcel_id == id; });
    if (rec == manifest.scenes.end()) throw DependencyError("evaluated parcel " + id + " is not in the dataset");
    const auto truth = raster::read_prescription(paths.dataset() / rec->truth_stem);
    const auto pred = raster::read_prescription(paths.eval(variant) / "maps" / (id + ".pred"));
    const auto actual_path = paths.render(variant) / (id + ".actual.pgm");
    const auto pred_path = paths.render(variant) / (id + ".predicted.pgm");
    evaluate::render_pgm_pair(truth, pred, actual_path, pred_path);
    written.push_back(actual_path);
    written.push_back(pred_path);
    ++done;
  }
  return written;
}

green::GreenReport run_green_report(const RunConfig& config, std::optional<double> power_watts) {
  if (power_watts && !(*power_watts > 0.0)) throw ConfigError("--power-watts must be positive");
  const Paths paths{config.output_dir};
  std::vector<green::VariantEnergy> runs;
  for (const auto& v : config.variants) {
    const auto path = paths.train(v) / "report.json";
    if (!fs::exists(path)) continue;
    const auto report = train::read_train_report(path);
    auto sample = report.energy;
    if (power_watts) sample = green::EnergySample::estimated(v, report.wall_seconds, *power_watts);
    runs.push_back({v, report.parameter_count, sample});
  }
  if (runs.empty()) throw DependencyError("no training reports under " + (paths.root / "train").string() + "; run train first");
  auto report = green::build_green_report(std::move(runs), config.emission_factor, config.reference_variant);
  fs::create_directories(paths.green());
  green::write_green_report(report, paths.green() / "report.json", paths.green() / "report.csv");
  return report;
}

}  // namespace terrai::pipeline
