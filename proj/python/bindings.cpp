#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cctype>
#include <cstring>

#include "terrai/common.hpp"
#include "terrai/evaluate.hpp"
#include "terrai/green.hpp"
#include "terrai/pipeline.hpp"
#include "terrai/preprocess.hpp"
#include "terrai/raster.hpp"
#include "terrai/synth.hpp"
#include "terrai/unet.hpp"

namespace py = pybind11;
using namespace terrai;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

F32 grid_array(const raster::BandGrid& g) {
  F32 out({g.height(), g.width()});
  std::memcpy(out.mutable_data(), g.values().data(), g.size() * sizeof(float));
  return out;
}

py::array_t<bool> mask_array(const raster::ValidityMask& m) {
  py::array_t<bool> out({m.height(), m.width()});
  auto* p = out.mutable_data();
  for (std::size_t i = 0; i < m.size(); ++i) p[i] = m.at(i);
  return out;
}

raster::BandGrid grid_from(const F32& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  return raster::BandGrid(a.shape(0), a.shape(1), std::vector<float>(a.data(), a.data() + a.size()));
}

raster::ValidityMask mask_from(const U8& a, std::size_t h, std::size_t w) {
  if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(0)) != h || static_cast<std::size_t>(a.shape(1)) != w) {
    throw ShapeError("mask shape does not match the grid");
  }
  raster::ValidityMask m(h, w);
  for (std::size_t i = 0; i < h * w; ++i) m.set(i, a.data()[i] != 0);
  return m;
}

autodiff::Tensor4 tensor_from(const F32& a) {
  if (a.ndim() != 4) throw ShapeError("expected an N x C x H x W array");
  autodiff::Shape s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                    static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
  return autodiff::Tensor4(s, std::vector<float>(a.data(), a.data() + a.size()));
}

F32 tensor_array(const autodiff::Tensor4& t) {
  const auto& s = t.shape();
  F32 out({s.n, s.c, s.h, s.w});
  std::memcpy(out.mutable_data(), t.raw(), t.numel() * sizeof(float));
  return out;
}

py::dict metrics_dict(const evaluate::MetricReport& r) {
  py::dict d;
  d["scope"] = evaluate::to_string(r.scope);
  d["rmse"] = r.rmse;
  d["mape"] = r.mape;
  d["smape"] = r.smape;
  d["n_items"] = r.n_items;
  d["n_pixels"] = r.n_pixels;
  d["excluded_zero_targets"] = r.excluded_zero_targets;
  return d;
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

pipeline::RunConfig run_config(const py::object& config) {
  if (config.is_none()) return pipeline::config_from_json(pipeline::default_config_json());
  auto j = pipeline::default_config_json();
  j.merge_patch(py_to_json(config));
  return pipeline::config_from_json(j);
}

py::dict scene_dict(const synth::SyntheticScene& s) {
  const std::size_t h = s.stack.height(), w = s.stack.width(), c = s.stack.channels.size();
  F32 stack({c, h, w});
  for (std::size_t k = 0; k < c; ++k) {
    std::memcpy(stack.mutable_data() + k * h * w, s.stack.channels[k].values().data(), h * w * sizeof(float));
  }
  py::list names;
  for (const auto& e : s.stack.schema.entries()) names.append(e.name);
  py::dict d;
  d["stack"] = stack;
  d["mask"] = mask_array(s.stack.mask);
  d["truth"] = grid_array(s.truth.grid);
  d["channels"] = names;
  d["parcel_id"] = s.stack.parcel_id;
  d["phase"] = s.stack.phase;
  return d;
}

}  // namespace

PYBIND11_MODULE(_terrai, m) {
  m.doc() = "Nitrogen prescription maps from soil-health rasters with a from-scratch U-Net";

  auto base = py::register_exception<Error>(m, "TerraiError", PyExc_RuntimeError);
  py::register_exception<IngestError>(m, "IngestError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DependencyError>(m, "DependencyError", base.ptr());

  m.attr("NODATA") = raster::kDefaultNoData;

  // raster
  m.def(
      "remap_nodata",
      [](const F32& grid, float sentinel) {
        const auto r = raster::remap_nodata(grid_from(grid), sentinel);
        return py::make_tuple(grid_array(r.grid), mask_array(r.mask));
      },
      py::arg("grid"), py::arg("sentinel") = raster::kDefaultNoData,
      "Replace the sentinel with 0; returns (grid, valid_mask).");
  m.def(
      "vegetation_index",
      [](const std::string& name, const F32& nir, const F32& other) {
        // `other` is the blue band for BNDVI and the red band for NDVI
        const auto a = grid_from(nir), b = grid_from(other);
        if (!a.same_shape(b)) throw ShapeError("bands differ in shape");
        raster::RasterStack s;
        std::string upper = name;
        for (auto& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        const bool blue = upper == "BNDVI";
        s.schema = raster::ChannelSchema(
            {{"nir", raster::ChannelKind::spectral}, {blue ? "blue" : "red", raster::ChannelKind::spectral}});
        s.channels = {a, b};
        s.mask = raster::ValidityMask(a.height(), a.width(), true);
        return grid_array(raster::compute_vegetation_index(s, name));
      },
      py::arg("name"), py::arg("nir"), py::arg("other"));
  m.def("default_channels", [] {
    std::vector<std::string> out;
    const auto schema = raster::ChannelSchema::default_schema();
    for (const auto& e : schema.entries()) out.push_back(e.name);
    return out;
  });

  // synth
  m.def(
      "generate_scene",
      [](std::uint64_t seed, std::size_t height, std::size_t width, double correlation_length, double label_noise_sd,
         double boundary_irregularity, const std::string& parcel_id) {
        synth::FieldSpec spec;
        spec.seed = seed;
        spec.height = height;
        spec.width = width;
        spec.correlation_length = correlation_length;
        spec.label_noise_sd = label_noise_sd;
        spec.boundary_irregularity = boundary_irregularity;
        spec.parcel_id = parcel_id;
        return scene_dict(synth::generate_scene(spec));
      },
      py::arg("seed"), py::arg("height") = 48, py::arg("width") = 48, py::arg("correlation_length") = 6.0,
      py::arg("label_noise_sd") = 2.0, py::arg("boundary_irregularity") = 0.3, py::arg("parcel_id") = "parcel_000");

  // preprocess
  m.def(
      "iqr_partition",
      [](const std::vector<double>& values, double multiplier) {
        const auto r = preprocess::iqr_partition(values, multiplier);
        py::dict d;
        d["kept"] = r.kept;
        d["dropped"] = r.dropped;
        d["q1"] = r.fences.q1;
        d["q3"] = r.fences.q3;
        d["lower"] = r.fences.lower;
        d["upper"] = r.fences.upper;
        return d;
      },
      py::arg("values"), py::arg("multiplier") = preprocess::kIqrMultiplier);
  m.def(
      "extract_patches",
      [](const F32& stack, const U8& mask, const F32& truth) {
        if (stack.ndim() != 3) throw ShapeError("stack must be C x H x W");
        const std::size_t c = stack.shape(0), h = stack.shape(1), w = stack.shape(2);
        synth::SyntheticScene s;
        std::vector<raster::ChannelEntry> entries;
        for (std::size_t k = 0; k < c; ++k) {
          entries.push_back({"c" + std::to_string(k), raster::ChannelKind::spectral});
          s.stack.channels.emplace_back(h, w, std::vector<float>(stack.data() + k * h * w, stack.data() + (k + 1) * h * w));
        }
        s.stack.schema = raster::ChannelSchema(entries);
        s.stack.mask = mask_from(mask, h, w);
        s.truth.grid = grid_from(truth);
        if (s.truth.grid.height() != h || s.truth.grid.width() != w) throw ShapeError("truth shape differs from stack");
        s.truth.mask = s.stack.mask;
        const auto patches = preprocess::extract_patches(s);
        F32 inputs({patches.size(), c, std::size_t{8}, std::size_t{8}});
        F32 labels({patches.size(), std::size_t{8}, std::size_t{8}});
        py::array_t<bool> masks({patches.size(), std::size_t{8}, std::size_t{8}});
        py::array_t<std::int64_t> origins({patches.size(), std::size_t{2}});
        for (std::size_t i = 0; i < patches.size(); ++i) {
          const auto& p = patches[i];
          std::memcpy(inputs.mutable_data() + i * c * 64, p.input.data(), c * 64 * sizeof(float));
          std::memcpy(labels.mutable_data() + i * 64, p.label.data(), 64 * sizeof(float));
          for (std::size_t k = 0; k < 64; ++k) masks.mutable_data()[i * 64 + k] = p.label_mask[k] != 0;
          origins.mutable_data()[2 * i] = static_cast<std::int64_t>(p.origin.row);
          origins.mutable_data()[2 * i + 1] = static_cast<std::int64_t>(p.origin.col);
        }
        return py::make_tuple(inputs, labels, masks, origins);
      },
      py::arg("stack"), py::arg("mask"), py::arg("truth"),
      "Stride-1 8x8 windows; returns (inputs, labels, masks, origins).");

  // model
  py::class_<unet::UNetModel>(m, "UNet")
      .def(py::init([](const std::string& variant, std::uint64_t seed, std::size_t input_channels) {
             return unet::build_model(unet::WidthConfig::from_name(variant), seed, input_channels);
           }),
           py::arg("variant") = "baseline", py::arg("seed") = 0, py::arg("input_channels") = 18)
      .def_property_readonly("variant", [](const unet::UNetModel& u) { return u.config().name; })
      .def_property_readonly("channels", [](const unet::UNetModel& u) { return u.config().channels; })
      .def_property_readonly("input_channels", &unet::UNetModel::input_channels)
      .def_property_readonly("parameter_count", &unet::UNetModel::parameter_count)
      .def("predict", [](const unet::UNetModel& u, const F32& x) { return tensor_array(u.predict(tensor_from(x))); })
      .def(
          "save",
          [](const unet::UNetModel& u, const std::filesystem::path& stem, const std::string& schema_checksum) {
            return unet::save_checkpoint(u, stem, schema_checksum);
          },
          py::arg("stem"), py::arg("schema_checksum") = raster::ChannelSchema::default_schema().checksum())
      .def_static("load", [](const std::filesystem::path& stem) { return unet::load_checkpoint(stem); });
  m.def("expected_parameter_count", [](const std::string& variant, std::size_t input_channels) {
    return unet::expected_parameter_count(unet::WidthConfig::from_name(variant), input_channels);
  }, py::arg("variant"), py::arg("input_channels") = 18);
  m.def(
      "masked_rmse",
      [](const F32& prediction, const F32& label, const U8& mask) {
        const auto p = tensor_from(prediction);
        if (static_cast<std::size_t>(label.size()) != p.numel() || static_cast<std::size_t>(mask.size()) != p.numel()) {
          throw ShapeError("label and mask must have as many elements as the prediction");
        }
        const auto r = unet::masked_rmse_loss(p, std::span<const float>(label.data(), label.size()),
                                              std::span<const std::uint8_t>(mask.data(), mask.size()));
        return py::make_tuple(r.loss, tensor_array(r.grad));
      },
      py::arg("prediction"), py::arg("label"), py::arg("mask"), "Returns (loss, d loss / d prediction).");

  // evaluate
  m.def(
      "patch_metrics",
      [](const F32& prediction, const F32& label, const U8& mask) {
        if (prediction.size() != label.size() || prediction.size() != mask.size()) {
          throw ShapeError("prediction, label and mask sizes differ");
        }
        return metrics_dict(evaluate::patch_metrics(std::span<const float>(prediction.data(), prediction.size()),
                                                    std::span<const float>(label.data(), label.size()),
                                                    std::span<const std::uint8_t>(mask.data(), mask.size())));
      },
      py::arg("prediction"), py::arg("label"), py::arg("mask"));
  m.def(
      "reconstruct_map",
      [](const F32& values, const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& origins,
         std::size_t height, std::size_t width) {
        if (values.ndim() != 3 || values.shape(1) != 8 || values.shape(2) != 8) throw ShapeError("values must be N x 8 x 8");
        if (origins.ndim() != 2 || origins.shape(0) != values.shape(0) || origins.shape(1) != 2) {
          throw ShapeError("origins must be N x 2");
        }
        std::vector<evaluate::PatchPrediction> preds(values.shape(0));
        for (std::size_t i = 0; i < preds.size(); ++i) {
          const auto r = origins.data()[2 * i], c = origins.data()[2 * i + 1];
          if (r < 0 || c < 0) throw ShapeError("negative patch origin");
          preds[i].origin.row = static_cast<std::size_t>(r);
          preds[i].origin.col = static_cast<std::size_t>(c);
          std::memcpy(preds[i].values.data(), values.data() + i * 64, 64 * sizeof(float));
        }
        const auto rec = evaluate::reconstruct_map(preds, height, width);
        py::array_t<std::uint32_t> cov({height, width});
        std::memcpy(cov.mutable_data(), rec.coverage.data(), rec.coverage.size() * sizeof(std::uint32_t));
        return py::make_tuple(grid_array(rec.map.grid), mask_array(rec.map.mask), cov);
      },
      py::arg("values"), py::arg("origins"), py::arg("height"), py::arg("width"),
      "Overlap-averaged map; returns (map, valid_mask, coverage).");

  // green
  m.def("joules_to_kwh", &green::joules_to_kwh);
  m.def("delta_energy", &green::delta_energy);
  m.def(
      "co2_equivalent",
      [](double delta_kwh, double kg_per_kwh) { return green::co2_equivalent(delta_kwh, {kg_per_kwh, ""}); },
      py::arg("delta_kwh"), py::arg("kg_co2e_per_kwh") = green::EmissionFactor{}.kg_co2e_per_kwh,
      "Grams of CO2e.");
  m.def("efficiency_gain", &green::efficiency_gain, py::arg("baseline_joules"), py::arg("variant_joules"));
  m.def(
      "green_report",
      [](const std::map<std::string, std::pair<std::size_t, double>>& runs, double kg_per_kwh,
         const std::string& reference) {
        std::vector<green::VariantEnergy> v;
        for (const auto& [name, pj] : runs) v.push_back({name, pj.first, green::EnergySample::measured(name, pj.second)});
        const auto report = green::build_green_report(v, {kg_per_kwh, "custom"}, reference);
        return json_to_py(nlohmann::json::parse(green::green_report_json(report)));
      },
      py::arg("runs"), py::arg("kg_co2e_per_kwh") = green::EmissionFactor{}.kg_co2e_per_kwh,
      py::arg("reference_variant") = "baseline",
      "runs maps variant -> (parameter_count, joules).");

  // pipeline stages; `config` is a dict merged over the defaults
  m.def("default_config", [] { return json_to_py(pipeline::default_config_json()); });
  m.def(
      "run_synth", [](const py::object& c) { return pipeline::run_synth(run_config(c)).scenes.size(); },
      py::arg("config") = py::none());
  m.def(
      "run_prep",
      [](const py::object& c) {
        const auto s = pipeline::run_prep(run_config(c));
        py::dict d;
        d["kept_scenes"] = s.kept_scenes;
        d["dropped_scenes"] = s.dropped_scenes;
        d["patches"] = s.patches;
        d["train"] = s.train;
        d["validation"] = s.validation;
        d["test"] = s.test;
        d["test_parcels"] = s.test_parcels;
        return d;
      },
      py::arg("config") = py::none());
  m.def(
      "run_train",
      [](const py::object& c, const std::string& variant) {
        const auto r = pipeline::run_train(run_config(c), variant);
        return json_to_py(nlohmann::json::parse(train::train_report_json(r)));
      },
      py::arg("config"), py::arg("variant"));
  m.def(
      "run_eval",
      [](const py::object& c, const std::string& variant) {
        const auto r = pipeline::run_eval(run_config(c), variant);
        py::dict d;
        d["variant"] = r.variant;
        d["parameter_count"] = r.parameter_count;
        d["patch"] = metrics_dict(r.patch);
        d["map"] = metrics_dict(r.map);
        d["mean_predictor_patch"] = metrics_dict(r.mean_predictor_patch);
        py::list maps;
        for (const auto& pm : r.per_map) {
          auto md = metrics_dict(pm.metrics);
          md["parcel_id"] = pm.parcel_id;
          maps.append(md);
        }
        d["per_map"] = maps;
        return d;
      },
      py::arg("config"), py::arg("variant"));
  m.def(
      "run_green_report",
      [](const py::object& c, std::optional<double> power_watts) {
        const auto r = pipeline::run_green_report(run_config(c), power_watts);
        return json_to_py(nlohmann::json::parse(green::green_report_json(r)));
      },
      py::arg("config"), py::arg("power_watts") = py::none());
}
