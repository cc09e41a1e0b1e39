#include "xover/causal_estimators.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "xover/errors.hpp"
#include "xover/stats.hpp"

namespace xover {

const char* to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::MU1: return "mu1";
    case EstimatorKind::MU2: return "mu2";
    case EstimatorKind::MU3: return "mu3";
  }
  return "?";
}

std::string EstimatorConfig::name() const {
  if (nonparametric) return "mu1";
  return std::string("mu2 ") + to_string(mean) + "+" + to_string(cov);
}

std::vector<EstimatorConfig> all_estimator_configs() {
  std::vector<EstimatorConfig> configs;
  for (MeanStructure ms : {MeanStructure::ABM, MeanStructure::PERIOD_BASELINE, MeanStructure::SIMPLE, MeanStructure::BASELINE_BY_TREATMENT}) {
    for (CovarianceStructure cs : {CovarianceStructure::UNSTRUCTURED, CovarianceStructure::AR1, CovarianceStructure::INDEPENDENCE}) {
      configs.push_back({false, ms, cs});
    }
  }
  configs.push_back({true, MeanStructure::ABM, CovarianceStructure::UNSTRUCTURED});
  return configs;
}

namespace {

void require_active_treatment(const TrialDataset& ds, int z) {
  if (z <= 0 || z >= ds.P) {
    throw ValidationError("treatment must be an active arm (1.." + std::to_string(ds.P - 1) + "), got " + std::to_string(z));
  }
}

// Fills SE and CI from centered influence values.
void finalize(EffectEstimate& e) {
  const int n = static_cast<int>(e.influence.size());
  e.df = n - 1;
  e.se = std::sqrt(e.influence.squaredNorm() / (static_cast<double>(n) * (n - 1)));
  const double q = t_quantile(0.5 + e.level / 2.0, e.df);
  e.ci_lower = e.estimate - q * e.se;
  e.ci_upper = e.estimate + q * e.se;
}

// Per-subject mu1 summand: sum_p [I(Z=z) - I(Z=0)] Y_pt.
Eigen::VectorXd mu1_summands(const TrialDataset& ds, int z, int t) {
  Eigen::VectorXd s(ds.n);
  for (int i = 0; i < ds.n; ++i) {
    double acc = 0.0;
    for (int p = 0; p < ds.P; ++p) {
      if (ds.Z(i, p) == z) acc += ds.y(i, p, t);
      else if (ds.Z(i, p) == 0) acc -= ds.y(i, p, t);
    }
    s[i] = acc;
  }
  return s;
}

// Per-subject G-computation summand: (1/P) sum_p [h(x_ip, z) - h(x_ip, 0)].
Eigen::VectorXd gcomp_summands(const FittedWorkingModel& m, int z, int t) {
  Eigen::VectorXd s(m.n);
  for (int i = 0; i < m.n; ++i) {
    double acc = 0.0;
    for (int p = 0; p < m.P; ++p) {
      acc += m.predict(i, p, z, t) - m.predict(i, p, 0, t);
    }
    s[i] = acc / m.P;
  }
  return s;
}

// Per-subject augmentation summand of mu3:
// sum_p [(I(Z=z) - 1/P) h(x,z) - (I(Z=0) - 1/P) h(x,0)].
Eigen::VectorXd augmentation_summands(const FittedWorkingModel& m, int z, int t) {
  const double invP = 1.0 / m.P;
  Eigen::VectorXd s(m.n);
  for (int i = 0; i < m.n; ++i) {
    double acc = 0.0;
    for (int p = 0; p < m.P; ++p) {
      const double wz = (m.Z(i, p) == z ? 1.0 : 0.0) - invP;
      const double w0 = (m.Z(i, p) == 0 ? 1.0 : 0.0) - invP;
      acc += wz * m.predict(i, p, z, t) - w0 * m.predict(i, p, 0, t);
    }
    s[i] = acc;
  }
  return s;
}

}  // namespace

std::vector<EffectEstimate> mu1(const TrialDataset& ds, int z, double level) {
  require_active_treatment(ds, z);
  std::vector<EffectEstimate> out;
  out.reserve(ds.T);
  for (int t = 0; t < ds.T; ++t) {
    const Eigen::VectorXd s = mu1_summands(ds, z, t);
    EffectEstimate e;
    e.kind = EstimatorKind::MU1;
    e.treatment = z;
    e.time = t;
    e.time_label = ds.timepoint_labels[t];
    e.treatment_label = ds.treatment_labels[z];
    e.level = level;
    e.estimate = s.mean();
    e.influence = s.array() - e.estimate;
    finalize(e);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<EffectEstimate> mu2(const FittedWorkingModel& m, const TrialDataset& ds, int z, double level,
                                bool use_mu3_influence) {
  require_active_treatment(ds, z);
  m.require_same_dataset(ds);
  std::vector<EffectEstimate> out;
  out.reserve(ds.T);
  for (int t = 0; t < ds.T; ++t) {
    EffectEstimate e;
    e.kind = EstimatorKind::MU2;
    e.treatment = z;
    e.time = t;
    e.time_label = ds.timepoint_labels[t];
    e.treatment_label = ds.treatment_labels[z];
    e.level = level;
    e.estimate = gcomp_summands(m, z, t).mean();
    e.influence = use_mu3_influence ? influence_mu3(m, ds, z, t) : influence_mu2(m, ds, z, t);
    finalize(e);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<EffectEstimate> mu3(const FittedWorkingModel& m, const TrialDataset& ds, int z, double level) {
  require_active_treatment(ds, z);
  m.require_same_dataset(ds);
  std::vector<EffectEstimate> out;
  out.reserve(ds.T);
  for (int t = 0; t < ds.T; ++t) {
    const Eigen::VectorXd s = mu1_summands(ds, z, t) - augmentation_summands(m, z, t);
    EffectEstimate e;
    e.kind = EstimatorKind::MU3;
    e.treatment = z;
    e.time = t;
    e.time_label = ds.timepoint_labels[t];
    e.treatment_label = ds.treatment_labels[z];
    e.level = level;
    e.estimate = s.mean();
    e.influence = s.array() - e.estimate;
    finalize(e);
    out.push_back(std::move(e));
  }
  return out;
}

Eigen::VectorXd influence_mu2(const FittedWorkingModel& m, const TrialDataset& ds, int z, int t) {
  require_active_treatment(ds, z);
  m.require_same_dataset(ds);

  const Eigen::VectorXd gcomp = gcomp_summands(m, z, t);
  const double mu2_hat = gcomp.mean();

  // G_beta: sample average of the beta-gradient of the G-computation
  // summand. The working model is linear in beta, so the gradient is the
  // covariate-difference design row.
  const int k = static_cast<int>(m.beta.size());
  Eigen::RowVectorXd G = Eigen::RowVectorXd::Zero(k);
  for (int i = 0; i < m.n; ++i) {
    for (int p = 0; p < m.P; ++p) {
      G += m.counterfactual_row(i, p, z, t) - m.counterfactual_row(i, p, 0, t);
    }
  }
  G /= static_cast<double>(m.n) * m.P;

  // psi(d_i) = (avg D'VinvD)^{-1} m(d_i) with m(d_i) = D_i' Vinv eps_i.
  Eigen::MatrixXd avg_gram = m.gram / static_cast<double>(m.n);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(avg_gram);
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-14)) {
    throw SingularMatrixError("E(grad m)", ldlt.info() == Eigen::Success ? ldlt.rcond() : 0.0);
  }

  Eigen::VectorXd phi(m.n);
  for (int i = 0; i < m.n; ++i) {
    const Eigen::VectorXd eps = m.residuals.row(i).transpose();
    Eigen::VectorXd score_i;
    if (m.V.has_value()) {
      score_i = m.D[i].transpose() * m.Vinv.apply(eps);
    } else {
      score_i = m.D[i].transpose() * (m.dense_weight_inv * eps);
    }
    const Eigen::VectorXd psi = ldlt.solve(score_i);
    phi[i] = (gcomp[i] - mu2_hat) + G.dot(psi);
  }
  return phi;
}

Eigen::VectorXd influence_mu3(const FittedWorkingModel& m, const TrialDataset& ds, int z, int t) {
  require_active_treatment(ds, z);
  m.require_same_dataset(ds);
  const Eigen::VectorXd s = mu1_summands(ds, z, t) - augmentation_summands(m, z, t);
  return s.array() - s.mean();
}

JointEffect joint_effect(const std::vector<EffectEstimate>& estimates) {
  if (estimates.empty()) throw ValidationError("joint_effect: empty estimate list");
  const int k = static_cast<int>(estimates.size());
  const int n = static_cast<int>(estimates[0].influence.size());
  JointEffect je;
  je.n = n;
  je.df = n - 1;
  je.estimate.resize(k);
  je.covariance.resize(k, k);
  for (int a = 0; a < k; ++a) {
    if (static_cast<int>(estimates[a].influence.size()) != n) {
      throw ValidationError("joint_effect: estimates computed on different subject counts");
    }
    je.coords.emplace_back(estimates[a].treatment, estimates[a].time);
    je.estimate[a] = estimates[a].estimate;
  }
  const double denom = static_cast<double>(n) * (n - 1);
  for (int a = 0; a < k; ++a) {
    for (int b = a; b < k; ++b) {
      const double c = estimates[a].influence.dot(estimates[b].influence) / denom;
      je.covariance(a, b) = c;
      je.covariance(b, a) = c;
    }
  }
  return je;
}

}  // namespace xover
