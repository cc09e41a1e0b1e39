#ifndef XOVER_SIM_ENGINE_HPP
#define XOVER_SIM_ENGINE_HPP

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xover/block_linalg.hpp"
#include "xover/causal_estimators.hpp"
#include "xover/trial_data.hpp"
#include "xover/working_model.hpp"

namespace xover {

enum class SequenceRule { UNIFORM_PERMUTATION, WILLIAMS_SQUARE };

const char* to_string(SequenceRule r);
SequenceRule sequence_rule_from_string(const std::string& s);

// Data-generating model: joint normal baselines per period, an ABM-type
// conditional outcome model, and a block-exchangeable residual covariance.
// The true effect of treatment z at timepoint t is the coefficient of the
// outcome model, recorded in the truth table.
struct GeneratorModel {
  Eigen::VectorXd baseline_mean;           // length P
  Eigen::MatrixXd baseline_cov;            // P x P, SPD
  Eigen::VectorXd coefficients;            // ABM coefficient vector
  std::vector<std::string> coef_names;
  Eigen::MatrixXd residual_A;              // T x T
  Eigen::MatrixXd residual_B;              // T x T
  Eigen::MatrixXd truth;                   // (P-1) x T, truth(z-1, t) = effect of z at t
  int n = 0;                               // subjects per replicate
  SequenceRule sequence_rule = SequenceRule::UNIFORM_PERMUTATION;
  std::vector<double> timepoint_labels;
  std::vector<std::string> treatment_labels;  // index 0 placebo

  int P() const { return static_cast<int>(baseline_mean.size()); }
  int T() const { return static_cast<int>(timepoint_labels.size()); }

  void validate() const;

  std::string to_json() const;
  static GeneratorModel from_json(const std::string& text);
};

// Fits the generator to a dataset: sample moments of the baselines, an
// ABM + unstructured fit for the conditional outcome model, its fitted
// blocks as residual covariance and its treatment coefficients as truth.
GeneratorModel fit_generator(const TrialDataset& ds);

// Draws one replicate trial. Deterministic in (g, seed): baselines from the
// joint normal, one treatment sequence per subject, outcomes = conditional
// mean + multivariate normal residual.
TrialDataset simulate_trial(const GeneratorModel& g, std::uint64_t seed);

struct SimulationConfig {
  int replicates = 10000;
  std::uint64_t seed = 1;
  std::vector<EstimatorConfig> configs = all_estimator_configs();
  double ci_level = 0.95;
  int workers = 1;

  void validate() const;
};

struct SimulationCell {
  int treatment = 0;  // z >= 1
  int time = 0;
  double truth = 0.0;
  double bias = 0.0;
  double sd = 0.0;      // sample SD of estimates over replicates
  double avg_se = 0.0;
  double coverage = 0.0;
};

struct SimulationReport {
  int replicates = 0;
  std::uint64_t seed = 0;
  int failed_replicates = 0;
  std::vector<EstimatorConfig> configs;
  std::vector<std::vector<SimulationCell>> cells;  // per config, (P-1)*T cells
  std::vector<std::string> treatment_labels;
  std::vector<double> timepoint_labels;
  double max_theorem1_gap = 0.0;  // max scaled |mu2 - mu3| over all fits
  double wall_seconds = 0.0;      // not serialized; runs are compared byte-wise

  const SimulationCell& cell(int config, int z, int t) const;

  // JSON without the wall clock, byte-identical for identical inputs.
  std::string to_json() const;
  // Aligned text, one bias/SD/SE/coverage table per (treatment, time).
  std::string to_text() const;
};

// Runs the full study: per replicate, simulate a trial, fit every requested
// configuration and collect estimate/SE/CI per (z, t); aggregates bias, SD,
// average SE and coverage against the generator truth. Replicate seeds are
// derived from the master seed by index, so results do not depend on the
// worker count. Replicates where any fit fails are excluded and counted
// (error if more than 1% fail).
SimulationReport run_study(const GeneratorModel& g, const SimulationConfig& cfg);

}  // namespace xover

#endif
