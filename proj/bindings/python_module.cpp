// Python bindings for the main operations: ingestion, fitting, the three
// estimators, prolongation tests, and the simulation engine.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "xover/causal_estimators.hpp"
#include "xover/errors.hpp"
#include "xover/hypothesis_tests.hpp"
#include "xover/report.hpp"
#include "xover/sim_engine.hpp"
#include "xover/trial_data.hpp"
#include "xover/version.hpp"
#include "xover/working_model.hpp"

namespace py = pybind11;
using namespace xover;

PYBIND11_MODULE(_core, m) {
  m.doc() = "causal analysis of cross-over (TQT) trials";
  m.attr("__version__") = kVersion;

  py::register_exception<Error>(m, "XoverError");

  py::class_<TrialDataset>(m, "TrialDataset")
      .def_readonly("n", &TrialDataset::n)
      .def_readonly("P", &TrialDataset::P)
      .def_readonly("T", &TrialDataset::T)
      .def_readonly("timepoints", &TrialDataset::timepoint_labels)
      .def_readonly("treatments", &TrialDataset::treatment_labels)
      .def_readonly("subject_ids", &TrialDataset::subject_ids)
      .def_readonly("baseline", &TrialDataset::X)
      .def_readonly("treatment_codes", &TrialDataset::Z)
      .def_readonly("outcomes", &TrialDataset::Y)
      .def("treatment_code", &TrialDataset::treatment_code)
      .def("validate", &TrialDataset::validate)
      .def("__repr__", [](const TrialDataset& ds) {
        return "<TrialDataset n=" + std::to_string(ds.n) + " P=" + std::to_string(ds.P) + " T=" + std::to_string(ds.T) + ">";
      });

  m.def(
      "ingest_csv",
      [](const std::string& path, const std::string& placebo) {
        auto res = ingest_csv(path, placebo);
        return py::make_tuple(res.dataset, res.dropped_subjects);
      },
      py::arg("path"), py::arg("placebo"),
      "Read a long-format CSV; returns (dataset, dropped_subject_ids).");
  m.def("write_csv", &write_csv, py::arg("dataset"), py::arg("path"));
  m.def("average_baseline", &average_baseline, py::arg("dataset"), py::arg("subject"));

  py::enum_<MeanStructure>(m, "MeanStructure")
      .value("ABM", MeanStructure::ABM)
      .value("PERIOD_BASELINE", MeanStructure::PERIOD_BASELINE)
      .value("SIMPLE", MeanStructure::SIMPLE)
      .value("BASELINE_BY_TREATMENT", MeanStructure::BASELINE_BY_TREATMENT);
  py::enum_<CovarianceStructure>(m, "CovarianceStructure")
      .value("UNSTRUCTURED", CovarianceStructure::UNSTRUCTURED)
      .value("AR1", CovarianceStructure::AR1)
      .value("INDEPENDENCE", CovarianceStructure::INDEPENDENCE);

  py::class_<FittedWorkingModel>(m, "FittedWorkingModel")
      .def_readonly("beta", &FittedWorkingModel::beta)
      .def_readonly("coef_names", &FittedWorkingModel::coef_names)
      .def_readonly("residuals", &FittedWorkingModel::residuals)
      .def_readonly("iterations", &FittedWorkingModel::iterations)
      .def_readonly("warnings", &FittedWorkingModel::warnings)
      .def("coef_index", &FittedWorkingModel::coef_index)
      .def("treatment_coef_index", &FittedWorkingModel::treatment_coef_index)
      .def("predict", &FittedWorkingModel::predict, py::arg("subject"), py::arg("period"), py::arg("z"), py::arg("t"))
      .def("identity_time_norm", &FittedWorkingModel::identity_time_norm)
      .def("identity_treatment_norm", &FittedWorkingModel::identity_treatment_norm)
      .def("score_norm", &FittedWorkingModel::score_norm)
      .def_property_readonly("A", [](const FittedWorkingModel& m_) { return m_.covariance.A; })
      .def_property_readonly("B", [](const FittedWorkingModel& m_) { return m_.covariance.B; });

  m.def("fit_wls", &fit_wls, py::arg("dataset"), py::arg("mean"), py::arg("cov"),
        "Iterated feasible GLS fit of the working model.");

  py::class_<EffectEstimate>(m, "EffectEstimate")
      .def_readonly("treatment", &EffectEstimate::treatment)
      .def_readonly("treatment_label", &EffectEstimate::treatment_label)
      .def_readonly("time", &EffectEstimate::time)
      .def_readonly("time_label", &EffectEstimate::time_label)
      .def_readonly("estimate", &EffectEstimate::estimate)
      .def_readonly("se", &EffectEstimate::se)
      .def_readonly("ci_lower", &EffectEstimate::ci_lower)
      .def_readonly("ci_upper", &EffectEstimate::ci_upper)
      .def_readonly("df", &EffectEstimate::df)
      .def_readonly("influence", &EffectEstimate::influence)
      .def("__repr__", [](const EffectEstimate& e) {
        return "<EffectEstimate " + e.treatment_label + "@" + std::to_string(e.time_label) + " = " + std::to_string(e.estimate) + " (se " + std::to_string(e.se) + ")>";
      });

  m.def("mu1", &mu1, py::arg("dataset"), py::arg("z"), py::arg("level") = 0.95);
  m.def("mu2", &mu2, py::arg("model"), py::arg("dataset"), py::arg("z"), py::arg("level") = 0.95,
        py::arg("use_mu3_influence") = true);
  m.def("mu3", &mu3, py::arg("model"), py::arg("dataset"), py::arg("z"), py::arg("level") = 0.95);
  m.def("influence_mu2", &influence_mu2, py::arg("model"), py::arg("dataset"), py::arg("z"), py::arg("t"));
  m.def("influence_mu3", &influence_mu3, py::arg("model"), py::arg("dataset"), py::arg("z"), py::arg("t"));

  py::class_<JointEffect>(m, "JointEffect")
      .def_readonly("estimate", &JointEffect::estimate)
      .def_readonly("covariance", &JointEffect::covariance)
      .def_readonly("n", &JointEffect::n)
      .def_readonly("df", &JointEffect::df);
  m.def("joint_effect", &joint_effect, py::arg("estimates"));

  py::class_<TestConfig>(m, "TestConfig")
      .def(py::init<>())
      .def_readwrite("delta", &TestConfig::delta)
      .def_readwrite("alpha", &TestConfig::alpha)
      .def_readwrite("mc_draws", &TestConfig::mc_draws)
      .def_readwrite("seed", &TestConfig::seed);
  py::class_<TestResult>(m, "TestResult")
      .def_readonly("statistics", &TestResult::statistics)
      .def_readonly("per_timepoint", &TestResult::per_timepoint)
      .def_readonly("reject", &TestResult::reject)
      .def_readonly("critical_value", &TestResult::critical_value);
  m.def("iu_test", &iu_test, py::arg("joint"), py::arg("config"), py::arg("expected_timepoints"));
  m.def("positive_control_test", &positive_control_test, py::arg("joint"), py::arg("config"), py::arg("expected_timepoints"));

  py::class_<GeneratorModel>(m, "GeneratorModel")
      .def_readonly("n", &GeneratorModel::n)
      .def_readonly("baseline_mean", &GeneratorModel::baseline_mean)
      .def_readonly("baseline_cov", &GeneratorModel::baseline_cov)
      .def_readonly("truth", &GeneratorModel::truth)
      .def_readonly("timepoints", &GeneratorModel::timepoint_labels)
      .def_readonly("treatments", &GeneratorModel::treatment_labels)
      .def("to_json", &GeneratorModel::to_json)
      .def_static("from_json", &GeneratorModel::from_json);
  m.def("fit_generator", &fit_generator, py::arg("dataset"));
  m.def("simulate_trial", &simulate_trial, py::arg("generator"), py::arg("seed"));

  py::class_<EstimatorConfig>(m, "EstimatorConfig")
      .def(py::init([](bool nonparametric, MeanStructure mean, CovarianceStructure cov) {
             return EstimatorConfig{nonparametric, mean, cov};
           }),
           py::arg("nonparametric") = false, py::arg("mean") = MeanStructure::ABM,
           py::arg("cov") = CovarianceStructure::UNSTRUCTURED)
      .def_readwrite("nonparametric", &EstimatorConfig::nonparametric)
      .def_readwrite("mean", &EstimatorConfig::mean)
      .def_readwrite("cov", &EstimatorConfig::cov)
      .def("name", &EstimatorConfig::name);
  m.def("all_estimator_configs", &all_estimator_configs);

  py::class_<SimulationConfig>(m, "SimulationConfig")
      .def(py::init<>())
      .def_readwrite("replicates", &SimulationConfig::replicates)
      .def_readwrite("seed", &SimulationConfig::seed)
      .def_readwrite("configs", &SimulationConfig::configs)
      .def_readwrite("ci_level", &SimulationConfig::ci_level)
      .def_readwrite("workers", &SimulationConfig::workers);
  py::class_<SimulationCell>(m, "SimulationCell")
      .def_readonly("treatment", &SimulationCell::treatment)
      .def_readonly("time", &SimulationCell::time)
      .def_readonly("truth", &SimulationCell::truth)
      .def_readonly("bias", &SimulationCell::bias)
      .def_readonly("sd", &SimulationCell::sd)
      .def_readonly("avg_se", &SimulationCell::avg_se)
      .def_readonly("coverage", &SimulationCell::coverage);
  py::class_<SimulationReport>(m, "SimulationReport")
      .def_readonly("replicates", &SimulationReport::replicates)
      .def_readonly("failed_replicates", &SimulationReport::failed_replicates)
      .def_readonly("max_theorem1_gap", &SimulationReport::max_theorem1_gap)
      .def("cell", &SimulationReport::cell, py::return_value_policy::reference_internal)
      .def("to_json", &SimulationReport::to_json)
      .def("to_text", &SimulationReport::to_text);
  m.def("run_study", &run_study, py::arg("generator"), py::arg("config"),
        py::call_guard<py::gil_scoped_release>());
}
