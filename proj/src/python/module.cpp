// Python bindings. Arrays cross the boundary as numpy (copied), volumes are
// [z, y, x] and spacings (x, y, z) in mm, as in the C++ API.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "calcseg/errors.hpp"
#include "calcseg/eval.hpp"
#include "calcseg/pipeline.hpp"
#include "calcseg/volume.hpp"

namespace py = pybind11;
using namespace calcseg;

namespace {

template <typename T>
using carray = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
torch::Tensor to_tensor(const carray<T>& a, torch::ScalarType dtype) {
    std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<T*>(a.data()), shape, dtype).clone();
}

torch::Tensor mask_tensor(const carray<uint8_t>& a) { return to_tensor(a, torch::kUInt8); }
torch::Tensor float_tensor(const carray<float>& a) { return to_tensor(a, torch::kFloat32); }

template <typename T>
py::array_t<T> to_numpy(const torch::Tensor& t) {
    auto c = t.contiguous();
    std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
    py::array_t<T> out(shape);
    std::memcpy(out.mutable_data(), c.data_ptr<T>(), sizeof(T) * static_cast<size_t>(c.numel()));
    return out;
}

Spacing spacing_of(const std::array<double, 3>& s) { return {s[0], s[1], s[2]}; }

RunConfig config_with(const std::map<std::string, std::string>& overrides) {
    auto cfg = default_run_config();
    for (const auto& [k, v] : overrides) apply_override(cfg, k, v);
    validate(cfg);
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Calcification segmentation on synthetic CT phantoms";

    auto base = py::register_exception<Error>(m, "CalcsegError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", base.ptr());
    py::register_exception<TrainingError>(m, "TrainingError", base.ptr());
    py::register_exception<FingerprintMismatch>(m, "FingerprintMismatch", base.ptr());
    py::register_exception<GenerationError>(m, "GenerationError", base.ptr());

    m.def("standardize_hu", [](const carray<float>& hu) { return to_numpy<float>(standardize_hu(float_tensor(hu))); },
          "Clip to [-1024, 2048] HU and map linearly onto [-1, 1].");

    m.def(
        "generate_phantom",
        [](int64_t index, uint64_t seed, std::array<int64_t, 3> dims) {
            PhantomConfig cfg;
            cfg.seed = seed;
            cfg.dims = {dims[0], dims[1], dims[2]};
            auto p = generate_phantom(cfg, index);
            const auto& s = p.volume.spacing;
            py::dict d;
            d["volume"] = to_numpy<float>(p.volume.data);
            d["label"] = to_numpy<uint8_t>(p.label);
            d["spacing"] = py::make_tuple(s.x, s.y, s.z);
            d["lesion_count"] = p.lesion_count;
            d["slice_thickness_mm"] = p.slice_thickness_mm;
            return d;
        },
        py::arg("index"), py::arg("seed") = 0, py::arg("dims") = std::array<int64_t, 3>{32, 32, 16},
        "Deterministic phantom; dims are (x, y, z), arrays come back [z, y, x].");

    m.def("dice", [](const carray<uint8_t>& p, const carray<uint8_t>& g) { return dice(mask_tensor(p), mask_tensor(g)); });
    m.def("precision_recall",
          [](const carray<uint8_t>& p, const carray<uint8_t>& g) { return precision_recall(mask_tensor(p), mask_tensor(g)); });
    m.def("volume_mm3", [](const carray<uint8_t>& mask, std::array<double, 3> spacing) {
        return volume_mm3(mask_tensor(mask), spacing_of(spacing));
    });

    m.def(
        "calibrate_threshold",
        [](const std::vector<carray<float>>& probs, const std::vector<carray<uint8_t>>& gts,
           const std::vector<std::array<double, 3>>& spacings, std::optional<std::vector<double>> grid) {
            std::vector<torch::Tensor> p, g;
            std::vector<Spacing> s;
            for (const auto& a : probs) p.push_back(float_tensor(a));
            for (const auto& a : gts) g.push_back(mask_tensor(a));
            for (const auto& a : spacings) s.push_back(spacing_of(a));
            const auto r = calibrate_threshold(p, g, s, grid ? *grid : default_calibration_grid());
            py::dict d;
            d["threshold"] = r.threshold;
            d["mean_abs_dv_before"] = r.mean_abs_dv_before;
            d["mean_abs_dv_after"] = r.mean_abs_dv_after;
            d["grid"] = r.grid;
            d["mean_abs_dv"] = r.mean_abs_dv;
            return d;
        },
        py::arg("probs"), py::arg("gts"), py::arg("spacings"), py::arg("grid") = py::none());

    m.def(
        "bootstrap_ci",
        [](const std::vector<double>& values, int64_t resamples, double confidence, uint64_t seed) {
            const auto ci = bootstrap_ci(values, resamples, confidence, seed);
            return py::make_tuple(ci.mean, ci.lo, ci.hi);
        },
        py::arg("values"), py::arg("resamples") = 1000, py::arg("confidence") = 0.95, py::arg("seed") = 0,
        "(mean, lo, hi) of the percentile bootstrap.");

    m.def("default_config_yaml", [] { return to_yaml(default_run_config().tree); });

    m.def(
        "phantom_gen",
        [](const std::string& out_dir, const std::map<std::string, std::string>& overrides) {
            const auto cfg = config_with(overrides);
            record_run(cfg, "phantom_gen", nlohmann::json::object(), out_dir);
            return cmd_phantom_gen(cfg, out_dir).manifest.string();
        },
        py::arg("out_dir"), py::arg("overrides") = std::map<std::string, std::string>{},
        "Writes phantoms and manifest.csv under out_dir; returns the manifest path.");
}
