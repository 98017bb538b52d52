// Copyright 2026 The cwdpo Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cwdpo/config.hpp"
#include "cwdpo/diagnostics.hpp"
#include "cwdpo/errors.hpp"
#include "cwdpo/objectives.hpp"
#include "cwdpo/suite.hpp"

namespace py = pybind11;
using namespace cwdpo;

PYBIND11_MODULE(_cwdpo, m) {
  m.doc() = "Two-stage SFT-C / CW-DPO toy trainer and diagnostics";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_OSError);
  py::register_exception<ComparisonError>(m, "ComparisonError", PyExc_ValueError);
  py::register_exception<CapabilityError>(m, "CapabilityError", PyExc_RuntimeError);

  m.def("sigmoid", &sigmoid);
  m.def("cooling_weight", [](double avg_log_prob, double floor, double temperature) {
    CoolingConfig c;
    c.floor = floor;
    c.temperature = temperature;
    c.validate();
    return cooling_weight(avg_log_prob, c);
  }, py::arg("avg_log_prob"), py::arg("floor") = -3.0, py::arg("temperature") = 1.0);
  m.def("tv_distance", [](const std::vector<double>& p, const std::vector<double>& q) {
    return tv_distance(p, q);
  });
  m.def("js_divergence", [](const std::vector<double>& p, const std::vector<double>& q) {
    return js_divergence(p, q);
  });
  m.def("expected_calibration_error",
        [](const std::vector<double>& confidence, const std::vector<bool>& correct, int bins) {
          if (confidence.size() != correct.size())
            throw InputError("confidence and correct differ in length");
          std::vector<Prediction> p;
          for (std::size_t i = 0; i < confidence.size(); ++i)
            p.push_back({confidence[i], correct[i]});
          return expected_calibration_error(p, bins);
        },
        py::arg("confidence"), py::arg("correct"), py::arg("bins") = 15);

  m.def("normalize_config", [](const std::string& text) { return format_config(parse_config(text)); },
        "Parse an INI config and return its complete echo.");
  m.def("run", [](const std::string& text, const std::filesystem::path& out) {
    py::gil_scoped_release release;
    run_experiment(parse_config(text), out);
  }, py::arg("config_text"), py::arg("out"));
  m.def("compare", [](const std::filesystem::path& a, const std::filesystem::path& b) {
    const auto r = compare_runs(a, b);
    std::ostringstream csv;
    write_compare_csv(csv, r);
    return py::make_tuple(csv.str(), compare_summary_json(r));
  });
  m.def("dynamics", [](const std::filesystem::path& bundle, std::size_t pairs, bool eta_sweep) {
    DynamicsOptions opt;
    opt.pairs = pairs;
    opt.eta_sweep = eta_sweep;
    const auto r = run_dynamics_suite(bundle, opt);
    py::dict d;
    d["median_relative_error"] = r.median_relative_error;
    d["median_halving_ratio"] = r.median_halving_ratio;
    d["max_profile_ratio_error"] = r.max_profile_ratio_error;
    return d;
  }, py::arg("bundle"), py::arg("pairs") = 4, py::arg("eta_sweep") = false);
}
