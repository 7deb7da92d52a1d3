#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "flowkrig/checkpoint.hpp"
#include "flowkrig/diagnostics.hpp"
#include "flowkrig/evaluation.hpp"
#include "flowkrig/io.hpp"
#include "flowkrig/run_config.hpp"
#include "flowkrig/synth.hpp"
#include "flowkrig/train.hpp"

namespace py = pybind11;
using namespace flowkrig;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Matrix& m) {
  Array a({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), a.mutable_data());
  return a;
}

Matrix from_numpy(const Array& a, const char* what) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(what) + " must be a 2-d array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["mae"] = m.mae;
  d["rmse"] = m.rmse;
  d["mape"] = m.mape;
  d["wmape"] = m.wmape;
  d["count"] = m.count;
  d["mape_skipped"] = m.mape_skipped;
  return d;
}

std::vector<std::size_t> rows_of(const DatasetBundle& d, const std::vector<std::string>& ids) {
  return resolve_ids(d.net, ids);
}

}  // namespace

PYBIND11_MODULE(_flowkrig, m) {
  m.doc() = "Traffic volume kriging at unsensored locations";

  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_ValueError);
  py::register_exception<TensorError>(m, "TensorError", PyExc_ValueError);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("parse", &RunConfig::parse, py::arg("text"), py::arg("source") = "config")
      .def_static("keys", &RunConfig::keys)
      .def("set", [](RunConfig& c, const std::string& k, const std::string& v) { c.set(k, v); })
      .def("validate", &RunConfig::validate)
      .def("to_text", &RunConfig::to_text)
      .def("__repr__", [](const RunConfig& c) { return "<RunConfig>\n" + c.to_text(); });

  py::class_<DatasetBundle>(m, "Dataset")
      .def_property_readonly("sensor_ids", [](const DatasetBundle& d) { return d.net.sensor_ids; })
      .def_property_readonly("directions", [](const DatasetBundle& d) { return d.net.directions; })
      .def_property_readonly("lanes", [](const DatasetBundle& d) { return d.net.lanes; })
      .def_property_readonly("volume", [](const DatasetBundle& d) { return to_numpy(d.volume); })
      .def_property_readonly("speed", [](const DatasetBundle& d) { return to_numpy(d.speed); })
      .def_property_readonly("start_time", [](const DatasetBundle& d) { return d.grid.start; })
      .def_property_readonly("flags", [](const DatasetBundle& d) -> std::optional<py::dict> {
        if (!d.flags) return std::nullopt;
        py::dict f;
        f["ramp_flanking"] = std::vector<bool>(d.flags->ramp_flanking.begin(), d.flags->ramp_flanking.end());
        f["bottleneck_exposed"] =
            std::vector<bool>(d.flags->bottleneck_exposed.begin(), d.flags->bottleneck_exposed.end());
        f["bottleneck_pair"] = std::vector<bool>(d.flags->bottleneck_pair.begin(), d.flags->bottleneck_pair.end());
        return f;
      })
      .def("save", [](const DatasetBundle& d, const std::filesystem::path& dir) { save_dataset(dir, d); });

  m.def("synthesize", [](const RunConfig& c) { return synthesize_corridor(c.synth_config()); },
        py::arg("config") = RunConfig{}, "Simulate the two-direction test corridor.");
  m.def("load_dataset", &load_dataset, py::arg("dir"));

  m.def("dtw", [](const std::vector<double>& x, const std::vector<double>& y) { return dtw_accumulate(x, y); },
        "Accumulated squared-difference DTW cost.");
  m.def("tai", [](const std::vector<double>& x, const std::vector<double>& up) { return tai(x, up); });

  m.def(
      "diagnose",
      [](const DatasetBundle& d, const RunConfig& c) {
        DiagnosticsConfig dc = c.diagnostics;
        dc.steps_per_day = static_cast<std::size_t>(86400 / d.grid.interval);
        const Matrix w = undirected_neighbor_weights(build_adjacency_set(d.net, c.diagnostics_kernel(d.net)).a_tilde);
        const DiagnosticsReport rep = diagnose(d.net, d.volume, w, dc);
        py::list out;
        for (const auto& s : rep.sensors) {
          py::dict row;
          row["sensor_id"] = s.sensor_id;
          row["wdssi"] = s.wdssi;
          row["tai"] = s.tai;
          row["category"] = std::string(category_name(s.category));
          out.append(row);
        }
        return out;
      },
      py::arg("dataset"), py::arg("config") = RunConfig{}, "WDSSI, TAI and flow category per sensor.");

  py::class_<TrainedModel>(m, "Model")
      .def_property_readonly("parameter_count", [](const TrainedModel& t) { return t.state.parameter_count(); })
      .def_property_readonly("hidden_dim", [](const TrainedModel& t) { return t.config.hidden_dim; })
      .def("save", [](const TrainedModel& t, const std::filesystem::path& p) { save_model(p, t); })
      .def(
          "estimate",
          [](const TrainedModel& t, const DatasetBundle& d, const std::vector<std::string>& observed) {
            const auto rows = rows_of(d, observed);
            Matrix est;
            {
              py::gil_scoped_release release;
              est = estimate_volumes(t, d.net, d.volume, d.speed, rows);
            }
            return to_numpy(est);
          },
          py::arg("dataset"), py::arg("observed"), "N x T volume estimates; unobserved rows are never read.");
  m.def("load_model", &load_model, py::arg("path"));

  m.def(
      "train",
      [](const DatasetBundle& d, const std::vector<std::string>& observed, const RunConfig& c) {
        c.validate();
        const auto rows = rows_of(d, observed);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(d.net, d.volume, d.speed, rows, c.training_kernel(d.net), c.model, c.train_config());
        }
        py::list log;
        for (const auto& e : r.epochs) log.append(py::make_tuple(e.epoch, e.train_loss, e.val_mae));
        return py::make_tuple(std::move(r.model), log);
      },
      py::arg("dataset"), py::arg("observed"), py::arg("config") = RunConfig{},
      "Train on the observed sensors; returns (model, [(epoch, train_loss, val_mae)]).");

  m.def(
      "knn_estimate",
      [](const DatasetBundle& d, const std::vector<std::string>& observed, const RunConfig& c) {
        const auto adj = build_adjacency_set(d.net, c.training_kernel(d.net));
        return to_numpy(knn_estimate(d.net, d.volume, adj.a_tilde, rows_of(d, observed)).estimate);
      },
      py::arg("dataset"), py::arg("observed"), py::arg("config") = RunConfig{});

  m.def(
      "metrics",
      [](const Array& truth, const Array& est) {
        const Matrix t = from_numpy(truth, "truth"), e = from_numpy(est, "estimate");
        if (t.rows != e.rows || t.cols != e.cols) throw std::invalid_argument("truth and estimate shapes differ");
        std::vector<std::size_t> rows(t.rows);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        return metrics_dict(compute_metrics(t, e, rows));
      },
      py::arg("truth"), py::arg("estimate"), "MAE, RMSE, MAPE and WMAPE over every entry.");

  m.attr("__version__") = "0.1.0";
}
