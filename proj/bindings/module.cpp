// Python bindings for the experiment harness: configs travel as flat
// {str: str} dicts (the same key=value schema the CLI and config files use),
// results come back as plain dicts of lists and floats.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <map>
#include <string>

#include "dpvi/harness.hpp"
#include "dpvi/mc.hpp"

namespace py = pybind11;
namespace hr = dpvi::harness;

namespace {

std::map<std::string, std::string> config_map(const py::dict& d) {
  std::map<std::string, std::string> kv;
  for (const auto& item : d) {
    std::string key = py::cast<std::string>(item.first);
    kv[key] = py::cast<std::string>(py::str(item.second));
  }
  return kv;
}

hr::ExperimentConfig config_from(const py::dict& d) {
  return hr::from_map(config_map(d));
}

py::dict marginals_out(const hr::RunResult& rr) {
  py::list t, mean, var;
  for (size_t k = 0; k < rr.marg.m.size(); ++k) {
    t.append(rr.t_nodes[k]);
    py::list mk, vk;
    for (int j = 0; j < rr.marg.m[k].size(); ++j) {
      mk.append(rr.marg.m[k](j));
      vk.append(rr.marg.S[k](j, j));
    }
    mean.append(mk);
    var.append(vk);
  }
  py::dict out;
  out["t"] = t;
  out["mean"] = mean;
  out["var"] = var;
  return out;
}

py::dict result_out(const hr::RunResult& rr) {
  py::dict out = marginals_out(rr);
  out["method"] = rr.method;
  out["status"] = rr.status;
  out["iters"] = rr.iters;
  out["wall_ms"] = rr.wall_ms;
  out["final_elbo"] =
      std::isfinite(rr.final_elbo) ? py::object(py::float_(rr.final_elbo))
                                   : py::object(py::none());
  py::list trace;
  for (const auto& row : rr.trace) trace.append(py::make_tuple(row.iter, row.elbo));
  out["trace"] = trace;
  py::dict metrics;
  for (const auto& [k, v] : rr.metrics) metrics[py::str(k)] = v;
  out["metrics"] = metrics;
  if (!rr.metric_series.empty()) out["logz_replicates"] = rr.metric_series;
  if (!rr.theta_trace.empty()) {
    py::list th;
    for (const auto& t : rr.theta_trace) {
      py::list row;
      for (int j = 0; j < t.size(); ++j) row.append(t(j));
      th.append(row);
    }
    out["theta_trace"] = th;
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(dpvi, m) {
  m.doc() = "Variational and Monte Carlo inference for latent diffusion models";

  py::register_exception<dpvi::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<dpvi::NumericalError>(m, "NumericalError",
                                               PyExc_RuntimeError);

  m.def("preset_names", &hr::preset_names, "Names of the bundled experiment presets.");

  m.def(
      "preset",
      [](const std::string& name) {
        py::dict out;
        for (const auto& [k, v] : hr::to_map(hr::preset(name)))
          out[py::str(k)] = v;
        return out;
      },
      py::arg("name"), "Preset configuration as a flat {key: value} dict.");

  m.def(
      "simulate",
      [](const py::dict& cfg_d) {
        hr::ExperimentConfig cfg = config_from(cfg_d);
        hr::Dataset ds = hr::make_dataset(cfg);
        py::dict out;
        out["t"] = ds.t_obs;
        out["y"] = ds.y;
        if (ds.latent.size() > 0) {
          out["t_latent"] = ds.t_latent;
          py::list lat;
          for (int k = 0; k < ds.latent.cols(); ++k) {
            py::list col;
            for (int j = 0; j < ds.latent.rows(); ++j) col.append(ds.latent(j, k));
            lat.append(col);
          }
          out["latent"] = lat;
        }
        return out;
      },
      py::arg("config"), "Draw (or load) the observations named by the config.");

  m.def(
      "run",
      [](const py::dict& cfg_d) { return result_out(hr::run(config_from(cfg_d))); },
      py::arg("config"),
      "Posterior inference or evidence estimation with config['method'].");

  m.def(
      "learn",
      [](const py::dict& cfg_d) {
        return result_out(hr::run_learn(config_from(cfg_d)));
      },
      py::arg("config"), "Variational EM parameter learning (cvi_dp or vgp).");

  m.def(
      "cross_validate",
      [](const py::dict& cfg_d, int folds) {
        hr::ExperimentConfig cfg = config_from(cfg_d);
        hr::CvResult cv = hr::nlpd_cv(cfg, folds > 0 ? folds : cfg.folds);
        py::dict out;
        out["nlpd"] = cv.nlpd;
        out["fold_nlpd"] = cv.fold_nlpd;
        out["fold_size"] = cv.fold_size;
        out["fold_std"] = cv.fold_std;
        out["point_std"] = cv.point_std;
        out["n_points"] = cv.n_points;
        return out;
      },
      py::arg("config"), py::arg("folds") = 0,
      "k-fold held-out NLPD; folds=0 takes the config's fold count.");
}
