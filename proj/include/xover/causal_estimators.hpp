#ifndef XOVER_CAUSAL_ESTIMATORS_HPP
#define XOVER_CAUSAL_ESTIMATORS_HPP

#include <Eigen/Core>
#include <string>
#include <vector>

#include "xover/trial_data.hpp"
#include "xover/working_model.hpp"

namespace xover {

enum class EstimatorKind { MU1, MU2, MU3 };

const char* to_string(EstimatorKind k);

// One analysis configuration: either the non-parametric estimator or a
// working-model G-computation with a mean and covariance family.
struct EstimatorConfig {
  bool nonparametric = false;  // mu1 when true, mean/cov ignored
  MeanStructure mean = MeanStructure::ABM;
  CovarianceStructure cov = CovarianceStructure::UNSTRUCTURED;

  std::string name() const;
  bool operator==(const EstimatorConfig&) const = default;
};

// The twelve model configurations followed by mu1.
std::vector<EstimatorConfig> all_estimator_configs();

// Point estimate of the causal contrast of treatment z against placebo at
// one timepoint, with per-subject influence values. The influence values
// are centered, SE^2 = sum(phi^2) / (n*(n-1)) and the confidence interval
// uses the t distribution with n-1 degrees of freedom.
struct EffectEstimate {
  EstimatorKind kind = EstimatorKind::MU1;
  int treatment = 0;          // z >= 1
  int time = 0;               // timepoint index
  double time_label = 0.0;    // hours
  std::string treatment_label;

  double estimate = 0.0;
  Eigen::VectorXd influence;  // n values, mean zero
  double se = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  double level = 0.95;
  int df = 0;                 // n - 1
};

// Stacked estimates sharing one estimator and model, with the joint
// covariance built from the influence values.
struct JointEffect {
  std::vector<std::pair<int, int>> coords;  // (z, t) per component
  Eigen::VectorXd estimate;
  Eigen::MatrixXd covariance;
  int n = 0;
  int df = 0;
};

// Non-parametric paired-difference estimator, one estimate per timepoint.
std::vector<EffectEstimate> mu1(const TrialDataset& ds, int z, double level = 0.95);

// G-computation plug-in over the fitted working model. For the model
// families in this library the Theorem conditions hold, so the variance is
// taken from the mu3 influence values (the recommended choice); set
// use_mu3_influence = false to use the M-estimator influence instead.
std::vector<EffectEstimate> mu2(const FittedWorkingModel& m, const TrialDataset& ds, int z, double level = 0.95,
                                bool use_mu3_influence = true);

// Augmented estimator: mu1 minus the randomization-balanced model term.
std::vector<EffectEstimate> mu3(const FittedWorkingModel& m, const TrialDataset& ds, int z, double level = 0.95);

// Influence values of mu2 via the M-estimator expansion (covariate term
// plus G_beta * psi with psi from the weighted least squares score).
Eigen::VectorXd influence_mu2(const FittedWorkingModel& m, const TrialDataset& ds, int z, int t);

// Influence values of mu3: the per-subject summand minus the estimate.
Eigen::VectorXd influence_mu3(const FittedWorkingModel& m, const TrialDataset& ds, int z, int t);

// Joint covariance of a stack of estimates computed on the same subjects:
// cov(a, b) = sum_i phi_i^a phi_i^b / (n*(n-1)).
JointEffect joint_effect(const std::vector<EffectEstimate>& estimates);

}  // namespace xover

#endif
