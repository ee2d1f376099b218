#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ien/decision.hpp"
#include "ien/ops.hpp"
#include "ien/trainer.hpp"

namespace py = pybind11;
using namespace ien;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

TensorF to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) throw ShapeMismatch("expected an array with at least one dimension");
  return TensorF(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_numpy(const TensorF& t) {
  py::array_t<float> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// JSON values cross the boundary as Python objects via their text form.
py::object to_python(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_python(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

GridSize grid_arg(const std::pair<int, int>& hw) { return {hw.first, hw.second}; }

IenConfig config_arg(const py::object& o) {
  return o.is_none() ? IenConfig::reference() : IenConfig::from_json(from_python(o));
}

}  // namespace

PYBIND11_MODULE(_ien, m) {
  m.doc() = "Early intention estimation: simulation, network, training and decision rule";

  py::register_exception<Error>(m, "IenError");
  py::register_exception<ShapeMismatch>(m, "ShapeMismatch", m.attr("IenError"));
  py::register_exception<NotNormalized>(m, "NotNormalized", m.attr("IenError"));
  py::register_exception<CenterOutOfGrid>(m, "CenterOutOfGrid", m.attr("IenError"));
  py::register_exception<CorruptArchive>(m, "CorruptArchive", m.attr("IenError"));
  py::register_exception<ConfigMismatch>(m, "ConfigMismatch", m.attr("IenError"));
  py::register_exception<SequenceTooLong>(m, "SequenceTooLong", m.attr("IenError"));
  py::register_exception<BboxOutOfGrid>(m, "BboxOutOfGrid", m.attr("IenError"));
  py::register_exception<LengthMismatch>(m, "LengthMismatch", m.attr("IenError"));

  m.def(
      "gaussian_heatmap",
      [](double x, double y, double sigma, std::pair<int, int> grid) {
        return to_numpy(gaussian_heatmap({x, y}, sigma, grid_arg(grid)));
      },
      py::arg("x"), py::arg("y"), py::arg("sigma") = kHeatmapSigma, py::arg("grid") = std::pair{64, 64});

  m.def("kl_divergence", [](const FloatArray& target, const FloatArray& pred, double eps) {
    const TensorF t = to_tensor(target), p = to_tensor(pred);
    if (t.shape() != p.shape()) throw ShapeMismatch("target and prediction shapes differ");
    return kl_value(t.data(), p.data(), eps);
  }, py::arg("target"), py::arg("pred"), py::arg("eps") = 1e-8);

  m.def("window_count", [](std::size_t frames, std::size_t length, std::size_t stride, std::size_t cap) {
    return window_count(frames, {length, stride, cap});
  }, py::arg("frames"), py::arg("length") = 10, py::arg("stride") = 1, py::arg("cap") = 50);

  m.def(
      "generate_scene",
      [](int n_objects, std::uint64_t seed, std::pair<int, int> grid) {
        return to_python(scene_to_json(generate_scene(n_objects, grid_arg(grid), seed)));
      },
      py::arg("n_objects"), py::arg("seed"), py::arg("grid") = std::pair{64, 64});

  m.def(
      "render_affordance_channels",
      [](const py::object& scene) { return to_numpy(render_affordance_channels(scene_from_json(from_python(scene)))); },
      py::arg("scene"));

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("trial_count", [](const Dataset& d) { return d.trials.size(); })
      .def_property_readonly("total_windows", &Dataset::total_windows)
      .def("summary", [](const Dataset& d) { return to_python(dataset_summary(d)); })
      .def("scene_channels", [](const Dataset& d, std::size_t i) { return to_numpy(d.trials.at(i).scene_channels); })
      .def("hand_stack", [](const Dataset& d, std::size_t i) { return to_numpy(d.trials.at(i).hand_stack); })
      .def("detected_scene", [](const Dataset& d, std::size_t i) { return to_python(scene_to_json(d.trials.at(i).detected)); })
      .def("save", [](const Dataset& d, const std::filesystem::path& p) { save_dataset(d, p); })
      .def("to_bytes", [](const Dataset& d) { return py::bytes(encode_dataset(d)); })
      .def_static("load", &load_dataset)
      .def_static("from_bytes", [](const py::bytes& b) { return decode_dataset(std::string(b)); });

  m.def(
      "build_dataset",
      [](std::size_t n_trials, const std::string& mode, std::uint64_t seed, bool noise_free) {
        if (n_trials == 0) throw ConfigMismatch("n_trials must be at least 1");
        DatasetConfig dc;
        dc.n_trials = n_trials;
        dc.mode = render_mode_from_string(mode);
        dc.seed = seed;
        if (noise_free) dc.noise = DetectorNoise::none();
        py::gil_scoped_release release;
        return build_dataset(dc);
      },
      py::arg("n_trials"), py::arg("mode") = "depth", py::arg("seed") = 0, py::arg("noise_free") = false);

  m.def("reference_config", [](std::size_t hand_channels, bool use_affordance) {
    return to_python(IenConfig::reference(hand_channels, use_affordance).to_json());
  }, py::arg("hand_channels") = 1, py::arg("use_affordance") = true);

  m.def("parameter_count", [](const py::object& config) { return parameter_count(config_arg(config)); },
        py::arg("config") = py::none());

  py::class_<Model>(m, "Model")
      .def_property_readonly("config", [](const Model& mdl) { return to_python(mdl.config.to_json()); })
      .def_property_readonly("parameter_names", [](const Model& mdl) {
        std::vector<std::string> names;
        for (const auto& [name, p] : mdl.params) names.push_back(name);
        return names;
      })
      .def("parameter", [](const Model& mdl, const std::string& name) { return to_numpy(mdl.params.at(name)); })
      .def("predict", [](const Model& mdl, const FloatArray& affordance, const FloatArray& hand_seq) {
        const TensorF a = to_tensor(affordance), h = to_tensor(hand_seq);
        TensorF out;
        {
          py::gil_scoped_release release;
          out = predict(mdl.params, mdl.config, a, h);
        }
        return to_numpy(out);
      }, py::arg("affordance"), py::arg("hand_seq"))
      .def("predict_prefixes", [](const Model& mdl, const FloatArray& affordance, const FloatArray& hand_seq,
                                  const std::vector<std::size_t>& lengths) {
        const TensorF a = to_tensor(affordance), h = to_tensor(hand_seq);
        std::vector<py::array_t<float>> out;
        for (const TensorF& t : predict_prefixes(mdl.params, mdl.config, a, h, lengths)) out.push_back(to_numpy(t));
        return out;
      }, py::arg("affordance"), py::arg("hand_seq"), py::arg("lengths"))
      .def("save", [](const Model& mdl, const std::filesystem::path& p) { save_checkpoint(mdl, p); })
      .def("to_bytes", [](const Model& mdl) { return py::bytes(encode_checkpoint(mdl)); })
      .def_static("load", &load_checkpoint)
      .def_static("from_bytes", [](const py::bytes& b) { return decode_checkpoint(std::string(b)); });

  m.def(
      "init_model",
      [](const py::object& config, std::uint64_t seed) {
        const IenConfig c = config_arg(config);
        return Model{c, init_params(c, seed)};
      },
      py::arg("config") = py::none(), py::arg("seed") = 0);

  m.def(
      "train",
      [](const Dataset& dataset, const py::object& config, const py::dict& train_config, int overfit) {
        const IenConfig c = config_arg(config);
        TrainConfig tc = TrainConfig::from_json(from_python(train_config));
        std::vector<WindowedSample> first;
        SampleSet samples = sample_set(dataset);
        if (overfit > 0) {
          for (int i = 0; i < overfit; ++i) {
            first.push_back(slide_windows(dataset.trials.at(static_cast<std::size_t>(i)), dataset.config.window,
                                          dataset.config.sigma)
                                .front());
          }
          samples = sample_set(first);
        }
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(samples, c, tc);
        }
        json log{{"step_losses", r.log.step_losses},
                 {"epoch_losses", r.log.epoch_losses},
                 {"wall_clock", r.log.wall_clock_seconds},
                 {"seed", r.log.seed},
                 {"config_hash", r.log.config_hash}};
        return py::make_tuple(Model{c, std::move(r.params)}, to_python(log));
      },
      py::arg("dataset"), py::arg("config") = py::none(), py::arg("train_config") = py::dict(),
      py::arg("overfit") = 0);

  m.def(
      "probability_trace",
      [](const Model& mdl, const Dataset& dataset, std::size_t trial, std::size_t max_frames) {
        ProbabilityTrace t;
        {
          py::gil_scoped_release release;
          t = probability_trace(mdl, dataset.trials.at(trial), max_frames);
        }
        return to_python(t.to_json());
      },
      py::arg("model"), py::arg("dataset"), py::arg("trial"), py::arg("max_frames") = 15);

  m.def(
      "object_confidences",
      [](const FloatArray& heatmap, const std::vector<std::array<int, 4>>& bboxes) {
        std::vector<Rect> rects;
        for (const auto& b : bboxes) rects.push_back({b[0], b[1], b[2], b[3]});
        return object_confidences(to_tensor(heatmap), rects);
      },
      py::arg("heatmap"), py::arg("bboxes"));

  m.def("normalize_confidences", [](const std::vector<double>& c) {
    const NormalizedConfidences n = normalize_confidences(c);
    return py::make_tuple(n.probabilities, n.degenerate);
  });

  m.def(
      "decide",
      [](const std::vector<double>& probabilities, double threshold, bool degenerate) -> std::optional<int> {
        std::vector<ObjectProbability> probs;
        for (std::size_t i = 0; i < probabilities.size(); ++i) {
          probs.push_back({static_cast<int>(i), probabilities[i], probabilities[i]});
        }
        return decide(probs, threshold, degenerate).chosen;
      },
      py::arg("probabilities"), py::arg("threshold"), py::arg("degenerate") = false);

  m.def("f_value", [](const std::vector<std::optional<int>>& chosen, const std::vector<int>& truths) {
    const FScore s = f_value(chosen, truths);
    py::dict d;
    d["tp"] = s.tp;
    d["fp"] = s.fp;
    d["fn"] = s.fn;
    d["precision"] = s.precision;
    d["recall"] = s.recall;
    d["f"] = s.f;
    return d;
  });
}
