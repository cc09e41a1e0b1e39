#ifndef XOVER_WORKING_MODEL_HPP
#define XOVER_WORKING_MODEL_HPP

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "xover/block_linalg.hpp"
#include "xover/trial_data.hpp"

namespace xover {

// Mean-structure families. All contain time main effects and
// treatment-by-time main effects with placebo as the reference level.
//
//   ABM                    h_pt = b_pt + b_xt*x + b_mt*xbar + b_zt
//   PERIOD_BASELINE        h_pt = b_pt + b_xt*x + b_zt
//   SIMPLE                 h_pt = b_t + b_x*x + b_zt
//   BASELINE_BY_TREATMENT  h_pt = b_t + b_xz*x + b_zt
enum class MeanStructure { ABM, PERIOD_BASELINE, SIMPLE, BASELINE_BY_TREATMENT };

// Within-period residual covariance families; the between-period block B is
// a constant matrix b*J (zero for INDEPENDENCE) so the stacked weight matrix
// is always block-exchangeable.
enum class CovarianceStructure { UNSTRUCTURED, AR1, INDEPENDENCE };

const char* to_string(MeanStructure ms);
const char* to_string(CovarianceStructure cs);
MeanStructure mean_structure_from_string(const std::string& s);
CovarianceStructure covariance_structure_from_string(const std::string& s);

// Per-subject design matrices (P*T rows each, period-major) plus the
// coefficient name map.
struct DesignInfo {
  std::vector<Eigen::MatrixXd> D;       // n matrices, (P*T) x k
  std::vector<std::string> coef_names;  // size k
  int k = 0;

  int coef_index(const std::string& name) const;
};

// Canonical coefficient order for a given shape; independent of any data.
std::vector<std::string> coefficient_names(MeanStructure ms, int P, const std::vector<double>& timepoint_labels,
                                           const std::vector<std::string>& treatment_labels);

// Evaluates one design row for covariates (x, xbar), period p, treatment z
// at timepoint t.
Eigen::RowVectorXd design_row_for(MeanStructure ms, int P, int T, double x, double xbar, int p, int z, int t);

inline Eigen::RowVectorXd design_row(const TrialDataset& ds, MeanStructure ms, double x, double xbar, int p, int z, int t) {
  return design_row_for(ms, ds.P, ds.T, x, xbar, p, z, t);
}

// Builds all per-subject design matrices and verifies full column rank;
// a rank-deficient coding raises ValidationError listing the dependent
// columns.
DesignInfo build_design(const TrialDataset& ds, MeanStructure ms);

// Fitted covariance parameters, depending on the family:
//   UNSTRUCTURED: A free, b
//   AR1:          sigma2, rho, b
//   INDEPENDENCE: sigma2
struct CovarianceFit {
  CovarianceStructure structure = CovarianceStructure::INDEPENDENCE;
  double sigma2 = 0.0;
  double rho = 0.0;
  double b = 0.0;
  Eigen::MatrixXd A;  // realized T x T diagonal block
  Eigen::MatrixXd B;  // realized T x T off-diagonal block
};

struct FittedWorkingModel {
  MeanStructure mean_structure;
  CovarianceFit covariance;

  Eigen::VectorXd beta;
  std::vector<std::string> coef_names;
  std::vector<Eigen::MatrixXd> D;       // per-subject design matrices
  Eigen::MatrixXd residuals;            // n x (P*T), eps_ipt = Y - D*beta

  // Weight matrix used in the final solve and its structured inverse.
  std::optional<BlockExchangeableMatrix> V;
  BlockInverse Vinv;

  // Gram matrix sum_i D_i' Vinv D_i of the final solve (the identification
  // matrix reused by influence computations).
  Eigen::MatrixXd gram;

  int iterations = 0;
  double final_step = 0.0;              // max |beta change| in the last iteration
  std::vector<std::string> warnings;

  // Dataset shape echo, used to verify model/dataset pairing.
  int n = 0, P = 0, T = 0;
  Eigen::MatrixXd X;                    // n x P baselines (copies for prediction)
  Eigen::VectorXd xbar;                 // n average baselines
  Eigen::MatrixXi Z;                    // n x P treatment codes

  int coef_index(const std::string& name) const;

  // Index of the treatment-by-time coefficient for (z >= 1, t).
  int treatment_coef_index(int z, int t) const;

  // Design row for a subject's own covariates under counterfactual
  // treatment z (also the beta-gradient of h, since h is linear in beta).
  Eigen::RowVectorXd counterfactual_row(int subject, int period, int z, int t) const;

  // h_pt(x_ip, z, beta): counterfactual prediction for a subject's own
  // baselines with treatment z.
  double predict(int subject, int period, int z, int t) const;

  double residual(int subject, int period, int t) const { return residuals(subject, static_cast<Eigen::Index>(period) * T + t); }

  // max_t of |sum_{i,p} eps_ipt| scaled by 1/(1 + sum |eps|): the time
  // main-effect residual identity.
  double identity_time_norm() const;
  // Same restricted to one treatment arm (z may be 0 = placebo).
  double identity_treatment_norm(int z) const;

  // Estimating-equation residual ||sum_i D_i' Vinv eps_i||_inf, scaled by
  // 1/(1 + ||sum_i D_i' Vinv Y_i||_inf).
  double score_norm(const TrialDataset& ds) const;

  // Cheap paired-dataset check (shape and baselines must match).
  void require_same_dataset(const TrialDataset& ds) const;

  std::vector<double> timepoint_labels;

  // Dense weight inverse for models fitted with fit_gls_fixed_weight; empty
  // when the structured V is present.
  Eigen::MatrixXd dense_weight_inv;
};

// Iterated feasible GLS: OLS start, then alternate moment estimation of the
// covariance parameters and re-solving the weighted normal equations until
// the coefficients stabilize (max |change| < 1e-10 * (1 + max |beta|), at
// most 100 iterations). The returned beta solves the estimating equation
// exactly (to solver precision) for the returned weight matrix.
FittedWorkingModel fit_wls(const TrialDataset& ds, MeanStructure ms, CovarianceStructure cs);

// Single GLS solve with an arbitrary fixed dense SPD weight matrix (PT x PT).
// Used as an independent check of the structured solver and as a negative
// control: a weight without block-exchangeable structure is allowed here.
FittedWorkingModel fit_gls_fixed_weight(const TrialDataset& ds, MeanStructure ms, const Eigen::MatrixXd& W);

}  // namespace xover

#endif
