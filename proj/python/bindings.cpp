#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "json.hpp"

#include "distdnas/cost_model.hpp"
#include "distdnas/data.hpp"
#include "distdnas/model_train.hpp"
#include "distdnas/pipeline.hpp"
#include "distdnas/search.hpp"
#include "distdnas/supernet.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

// Structured values cross the boundary as JSON text; the Python package
// decodes them into dicts.
distdnas::RunConfig config_from_text(const std::string& text) {
  distdnas::RunConfig c;
  try {
    c = json::parse(text).get<distdnas::RunConfig>();
  } catch (const json::exception& e) {
    throw distdnas::ConfigError(e.what());
  }
  c.validate();
  return c;
}

std::string metrics_text(const distdnas::MetricsRow& r) {
  json j{{"run_id", r.run_id},      {"mode", r.mode},       {"M", r.M},
         {"flops", r.flops},        {"params", r.params},   {"logloss", r.metrics.logloss},
         {"auc", r.metrics.auc},    {"ne", r.metrics.ne},   {"examples", r.metrics.examples}};
  if (r.metrics.relative_ne) j["relative_ne"] = *r.metrics.relative_ne;
  return j.dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of distdnas";

  // Translators registered later are tried first, so the base class goes first.
  py::register_exception<distdnas::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<distdnas::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<distdnas::IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<distdnas::ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<distdnas::DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  m.def("default_config", [] { return json(distdnas::RunConfig{}).dump(); });
  m.def("resolve_config", [](const std::string& text) { return json(config_from_text(text).resolved()).dump(); });
  m.def("config_hash", [](const std::string& text) { return distdnas::hex64(distdnas::config_hash(config_from_text(text))); });

  m.def("log_loss", [](const std::vector<double>& p, const std::vector<double>& y) { return distdnas::log_loss(p, y); });
  m.def("auc", [](const std::vector<double>& s, const std::vector<double>& y) { return distdnas::auc_score(s, y); });
  m.def("normalized_entropy", [](const std::vector<double>& p, const std::vector<double>& y) {
    return distdnas::compute_metrics(p, y).ne;
  });

  m.def("count_flops", [](const std::string& arch_doc, const std::string& supernet_doc, distdnas::Index stacks) {
    const auto cfg = json::parse(supernet_doc).get<distdnas::SupernetConfig>();
    const auto arch = distdnas::binary_arch_from_json(json::parse(arch_doc));
    const auto f = distdnas::count_flops(arch, cfg, stacks);
    return json{{"stem", f.stem}, {"merge", f.merge}, {"interactions", f.interactions}, {"head", f.head},
                {"total", f.total()}}.dump();
  }, py::arg("arch"), py::arg("supernet"), py::arg("stacks") = 1);

  m.def("discretize", [](const std::string& arch_doc, double theta) {
    const auto bits = distdnas::discretize(distdnas::arch_probs_from_json(json::parse(arch_doc)), theta);
    auto rows = [](const std::vector<distdnas::OpBits>& family) {
      json out = json::array();
      for (const auto& row : family) {
        json r = json::array();
        for (bool b : row) r.push_back(b ? 1 : 0);
        out.push_back(r);
      }
      return out;
    };
    return json{{"dense_bits", rows(bits.dense)}, {"sparse_bits", rows(bits.sparse)}}.dump();
  });

  m.def("synthetic_day_summary", [](const std::string& synth_doc, int day) {
    const auto cfg = json::parse(synth_doc).get<distdnas::SynthConfig>();
    const distdnas::DayShard s = distdnas::generate_synthetic_day(cfg, day);
    return json{{"day", s.day}, {"examples", s.size()}, {"positive_rate", s.positive_rate()}}.dump();
  });

  py::class_<distdnas::Pipeline>(m, "Pipeline")
      .def(py::init([](const std::string& text) { return distdnas::Pipeline(config_from_text(text)); }))
      .def("config", [](const distdnas::Pipeline& p) { return json(p.config()).dump(); })
      .def("synth", &distdnas::Pipeline::synth, py::call_guard<py::gil_scoped_release>())
      .def("importance", [](distdnas::Pipeline& p) {
        py::gil_scoped_release release;
        return distdnas::importance_document(p.importance()).dump();
      })
      .def("search", [](distdnas::Pipeline& p) {
        py::gil_scoped_release release;
        return p.search().report().dump();
      })
      .def("discretize", [](distdnas::Pipeline& p) { return p.discretize().str(); })
      .def("train", [](distdnas::Pipeline& p) {
        py::gil_scoped_release release;
        return metrics_text(p.train());
      })
      .def("eval", [](distdnas::Pipeline& p) { return metrics_text(p.eval()); })
      .def("recurring", [](distdnas::Pipeline& p) {
        py::gil_scoped_release release;
        json rows = json::array();
        for (const auto& r : p.recurring()) {
          json row{{"t", r.t}, {"auc", r.metrics.auc}, {"ne", r.metrics.ne}, {"logloss", r.metrics.logloss}};
          if (r.metrics.relative_ne) row["relative_ne"] = *r.metrics.relative_ne;
          rows.push_back(row);
        }
        return rows.dump();
      })
      .def("frontier", &distdnas::Pipeline::frontier)
      .def("write_manifest", &distdnas::Pipeline::write_manifest)
      .def("artifacts", [](const distdnas::Pipeline& p) {
        std::map<std::string, std::string> out;
        for (const auto& [k, v] : p.artifacts()) out[k] = distdnas::hex64(v);
        return out;
      });
}
