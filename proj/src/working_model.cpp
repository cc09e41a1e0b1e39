#include "xover/working_model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "xover/errors.hpp"

namespace xover {

const char* to_string(MeanStructure ms) {
  switch (ms) {
    case MeanStructure::ABM: return "abm";
    case MeanStructure::PERIOD_BASELINE: return "period-baseline";
    case MeanStructure::SIMPLE: return "simple";
    case MeanStructure::BASELINE_BY_TREATMENT: return "baseline-by-treatment";
  }
  return "?";
}

const char* to_string(CovarianceStructure cs) {
  switch (cs) {
    case CovarianceStructure::UNSTRUCTURED: return "unstructured";
    case CovarianceStructure::AR1: return "ar1";
    case CovarianceStructure::INDEPENDENCE: return "independence";
  }
  return "?";
}

MeanStructure mean_structure_from_string(const std::string& s) {
  if (s == "abm") return MeanStructure::ABM;
  if (s == "period-baseline") return MeanStructure::PERIOD_BASELINE;
  if (s == "simple") return MeanStructure::SIMPLE;
  if (s == "baseline-by-treatment") return MeanStructure::BASELINE_BY_TREATMENT;
  throw ValidationError("unknown mean structure: " + s);
}

CovarianceStructure covariance_structure_from_string(const std::string& s) {
  if (s == "unstructured") return CovarianceStructure::UNSTRUCTURED;
  if (s == "ar1") return CovarianceStructure::AR1;
  if (s == "independence") return CovarianceStructure::INDEPENDENCE;
  throw ValidationError("unknown covariance structure: " + s);
}

namespace {

std::string format_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

int design_width(MeanStructure ms, int P, int T) {
  const int treat = (P - 1) * T;
  switch (ms) {
    case MeanStructure::ABM: return P * T + T + T + treat;
    case MeanStructure::PERIOD_BASELINE: return P * T + T + treat;
    case MeanStructure::SIMPLE: return T + 1 + treat;
    case MeanStructure::BASELINE_BY_TREATMENT: return T + P + treat;
  }
  return 0;
}

// Shared row builder: column layout is [intercept block | baseline block |
// treatment-by-time block], with the treatment block always last.
void fill_design_row(Eigen::RowVectorXd& row, MeanStructure ms, int P, int T, double x, double xbar, int p, int z, int t) {
  row.setZero();
  int off = 0;
  switch (ms) {
    case MeanStructure::ABM:
      row[off + p * T + t] = 1.0;
      off += P * T;
      row[off + t] = x;
      off += T;
      row[off + t] = xbar;
      off += T;
      break;
    case MeanStructure::PERIOD_BASELINE:
      row[off + p * T + t] = 1.0;
      off += P * T;
      row[off + t] = x;
      off += T;
      break;
    case MeanStructure::SIMPLE:
      row[off + t] = 1.0;
      off += T;
      row[off] = x;
      off += 1;
      break;
    case MeanStructure::BASELINE_BY_TREATMENT:
      row[off + t] = 1.0;
      off += T;
      row[off + z] = x;
      off += P;
      break;
  }
  if (z >= 1) row[off + (z - 1) * T + t] = 1.0;
}

struct MomentEstimates {
  CovarianceFit fit;
  std::vector<std::string> warnings;
};

// Neumaier-compensated accumulation; keeps sums over subjects independent of
// subject order to well below double rounding.
struct CompensatedScalar {
  double sum = 0.0, comp = 0.0;
  void add(double v) {
    const double t = sum + v;
    comp += (std::abs(sum) >= std::abs(v)) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

struct CompensatedMatrix {
  Eigen::MatrixXd sum, comp;
  CompensatedMatrix(Eigen::Index r, Eigen::Index c) : sum(Eigen::MatrixXd::Zero(r, c)), comp(Eigen::MatrixXd::Zero(r, c)) {}
  void add(const Eigen::MatrixXd& v) {
    for (Eigen::Index j = 0; j < sum.cols(); ++j) {
      for (Eigen::Index i = 0; i < sum.rows(); ++i) {
        const double s = sum(i, j), x = v(i, j);
        const double t = s + x;
        comp(i, j) += (std::abs(s) >= std::abs(x)) ? (s - t) + x : (x - t) + s;
        sum(i, j) = t;
      }
    }
  }
  Eigen::MatrixXd value() const { return sum + comp; }
};

// Projects a symmetric matrix onto the SPD cone by flooring eigenvalues at
// 1e-8 * trace/T (absolute 1e-8 when the trace vanishes).
Eigen::MatrixXd spd_floor(const Eigen::MatrixXd& M, bool& floored) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  const double tr = M.trace();
  const double floor = 1e-8 * std::max(tr / static_cast<double>(M.rows()), 1.0);
  Eigen::VectorXd ev = es.eigenvalues();
  floored = false;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < floor) {
      ev[i] = floor;
      floored = true;
    }
  }
  if (!floored) return M;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// Closed-form moment estimators of the covariance parameters from the
// n x (P*T) residual matrix. Denominators are raw pair counts.
MomentEstimates estimate_covariance(const Eigen::MatrixXd& E, CovarianceStructure cs, int P, int T) {
  MomentEstimates out;
  out.fit.structure = cs;
  const int n = static_cast<int>(E.rows());
  const Eigen::MatrixXd J = Eigen::MatrixXd::Ones(T, T);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(T, T);

  // Between-period constant: mean over {i, p != q, t, s} of e_ipt * e_iqs.
  double b = 0.0;
  if (P > 1) {
    CompensatedScalar acc;
    for (int i = 0; i < n; ++i) {
      double total = 0.0, sqsum = 0.0;
      for (int p = 0; p < P; ++p) {
        const double rs = E.row(i).segment(p * T, T).sum();
        total += rs;
        sqsum += rs * rs;
      }
      acc.add(total * total - sqsum);
    }
    b = acc.value() / (static_cast<double>(n) * P * (P - 1) * T * T);
  }

  switch (cs) {
    case CovarianceStructure::INDEPENDENCE: {
      CompensatedScalar acc;
      for (int i = 0; i < n; ++i) acc.add(E.row(i).squaredNorm());
      double s2 = acc.value() / (static_cast<double>(n) * P * T);
      if (s2 <= 0.0) {
        s2 = 1e-8;
        out.warnings.push_back("independence: zero residual variance floored");
      }
      out.fit.sigma2 = s2;
      out.fit.b = 0.0;
      out.fit.A = s2 * I;
      out.fit.B = Eigen::MatrixXd::Zero(T, T);
      break;
    }
    case CovarianceStructure::UNSTRUCTURED: {
      CompensatedMatrix acc(T, T);
      Eigen::MatrixXd outer(T, T);
      for (int i = 0; i < n; ++i) {
        for (int p = 0; p < P; ++p) {
          const Eigen::VectorXd e = E.row(i).segment(p * T, T).transpose();
          outer.noalias() = e * e.transpose();
          acc.add(outer);
        }
      }
      Eigen::MatrixXd A = acc.value() / (static_cast<double>(n) * P);
      bool floored = false;
      A = spd_floor(A, floored);
      if (floored) out.warnings.push_back("unstructured: moment estimate of A projected to SPD");
      out.fit.b = b;
      out.fit.A = A;
      out.fit.B = b * J;
      break;
    }
    case CovarianceStructure::AR1: {
      // Index-based lag moments gamma_k.
      std::vector<double> gamma(T, 0.0);
      for (int k = 0; k < T; ++k) {
        CompensatedScalar acc;
        for (int i = 0; i < n; ++i) {
          double sub = 0.0;
          for (int p = 0; p < P; ++p) {
            for (int t = k; t < T; ++t) sub += E(i, p * T + t) * E(i, p * T + t - k);
          }
          acc.add(sub);
        }
        gamma[k] = acc.value() / (static_cast<double>(n) * P * (T - k));
      }
      double s2 = gamma[0] - b;
      if (s2 <= 0.0) {
        s2 = 1e-8 * std::max(gamma[0], 1.0);
        out.warnings.push_back("ar1: nonpositive within-period variance floored");
      }
      double rho = 0.0;
      if (T > 1 && s2 > 0.0) rho = std::clamp((gamma[1] - b) / s2, -0.999, 0.999);
      Eigen::MatrixXd R(T, T);
      for (int t = 0; t < T; ++t)
        for (int s = 0; s < T; ++s) R(t, s) = std::pow(rho, std::abs(t - s));
      out.fit.sigma2 = s2;
      out.fit.rho = rho;
      out.fit.b = b;
      out.fit.A = b * J + s2 * R;
      out.fit.B = b * J;
      break;
    }
  }
  return out;
}

// Reciprocal condition estimate through a Cholesky factorization, so it is
// zero for anything that is not numerically positive definite.
double spd_rcond(const Eigen::MatrixXd& M) {
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  return llt.info() == Eigen::Success ? llt.rcond() : 0.0;
}

// Clamps the between-period constant into the interval where A, A - B and
// A + (P-1)B are all positive definite (with a 5% margin). Mean structures
// without subject-level terms can otherwise push the moment estimate of b
// past the boundary, after which the iteration diverges.
void clamp_between_period(CovarianceFit& fit, int P, double b_cap, std::vector<std::string>& warnings) {
  if (P < 2 || fit.structure == CovarianceStructure::INDEPENDENCE || fit.b == 0.0) return;
  const Eigen::Index T = fit.A.rows();
  const Eigen::MatrixXd J = Eigen::MatrixXd::Ones(T, T);
  double lo, hi;
  if (fit.structure == CovarianceStructure::UNSTRUCTURED) {
    // A is the (PD) moment estimate; bound b so A - bJ and A + (P-1)bJ stay PD.
    Eigen::LLT<Eigen::MatrixXd> llt(fit.A);
    if (llt.info() != Eigen::Success) return;  // leave it to the guard loop
    const double s = llt.solve(Eigen::VectorXd::Ones(T)).sum();
    if (!(s > 0.0)) return;
    hi = 0.95 / s;
    lo = -0.95 / (static_cast<double>(P - 1) * s);
  } else {
    // AR1: the within part sigma^2 R is PD; only a lower bound on b exists.
    const Eigen::MatrixXd within = fit.A - fit.b * J;
    Eigen::LLT<Eigen::MatrixXd> llt(within);
    if (llt.info() != Eigen::Success) return;
    const double s = llt.solve(Eigen::VectorXd::Ones(T)).sum();
    if (!(s > 0.0)) return;
    lo = -0.95 / (static_cast<double>(P) * s);
    hi = std::numeric_limits<double>::infinity();
  }
  // An honest between-period covariance is bounded by the residual variance
  // scale (Cauchy-Schwarz); capping at a fixed multiple of the initial
  // residual variance stops the moment/GLS feedback from running away for
  // mean structures without subject-level terms.
  lo = std::max(lo, -b_cap);
  hi = std::min(hi, b_cap);
  const double clamped = std::clamp(fit.b, lo, hi);
  if (clamped != fit.b) {
    if (fit.structure == CovarianceStructure::AR1) fit.A += (clamped - fit.b) * J;
    fit.B = clamped * J;
    fit.b = clamped;
    const std::string w = "between-period covariance clamped to the feasible range";
    if (std::find(warnings.begin(), warnings.end(), w) == warnings.end()) warnings.push_back(w);
  }
}

// Builds the block weight matrix, shrinking the between-period block toward
// zero and inflating the diagonal when a factor is singular or conditioned
// too poorly to serve as a weight. Any adjustment keeps the form of the
// block-exchangeable family, which is all the estimators require of it.
BlockExchangeableMatrix guarded_blocks(CovarianceFit& fit, int P, std::vector<std::string>& warnings) {
  constexpr double kWorkingRcond = 1e-7;
  const Eigen::Index T = fit.A.rows();
  double bump = 1e-6;
  for (int attempt = 0; attempt < 80; ++attempt) {
    bool ok = spd_rcond(fit.A) > kWorkingRcond;
    if (ok && P > 1) {
      ok = spd_rcond(fit.A - fit.B) > kWorkingRcond &&
           spd_rcond(fit.A + (P - 1) * fit.B) > kWorkingRcond;
    }
    if (ok) return BlockExchangeableMatrix(fit.A, fit.B, P);
    if (attempt % 2 == 0 && fit.B.cwiseAbs().maxCoeff() > 0.0) {
      fit.B *= 0.5;
      fit.b *= 0.5;
      if (attempt == 0) warnings.push_back("weight matrix regularized: between-period block shrunk");
    } else {
      fit.A += bump * std::max(fit.A.trace() / T, 1.0) * Eigen::MatrixXd::Identity(T, T);
      bump *= 2.0;
      if (attempt == 1) warnings.push_back("weight matrix regularized: diagonal inflated");
    }
  }
  // Let any remaining failure surface with the factor name.
  return BlockExchangeableMatrix(fit.A, fit.B, P);
}

// Solves M x = r for the symmetric Gram matrix of the weighted normal
// equations. The system is Jacobi-equilibrated first (covariate columns on
// the QTc scale are ~400x larger than indicator columns, which otherwise
// costs ~8 digits of accuracy) and polished with iterative refinement.
Eigen::VectorXd solve_normal_equations(const Eigen::MatrixXd& M, const Eigen::VectorXd& r) {
  const Eigen::Index k = M.rows();
  Eigen::VectorXd s(k);
  for (Eigen::Index j = 0; j < k; ++j) s[j] = 1.0 / std::sqrt(std::max(M(j, j), 1e-30));
  const Eigen::MatrixXd Ms = s.asDiagonal() * M * s.asDiagonal();
  const Eigen::VectorXd rs = s.asDiagonal() * r;

  Eigen::LDLT<Eigen::MatrixXd> ldlt(Ms);
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-15)) {
    throw SingularMatrixError("D'V^{-1}D", ldlt.info() == Eigen::Success ? ldlt.rcond() : 0.0);
  }
  Eigen::VectorXd x = ldlt.solve(rs);
  double prev = std::numeric_limits<double>::infinity();
  for (int pass = 0; pass < 5; ++pass) {
    const Eigen::VectorXd resid = rs - Ms * x;
    const double rnorm = resid.cwiseAbs().maxCoeff();
    if (!(rnorm < prev)) break;
    prev = rnorm;
    x += ldlt.solve(resid);
  }
  return s.asDiagonal() * x;
}

}  // namespace

int DesignInfo::coef_index(const std::string& name) const {
  for (size_t i = 0; i < coef_names.size(); ++i) {
    if (coef_names[i] == name) return static_cast<int>(i);
  }
  throw ValidationError("unknown coefficient: " + name);
}

std::vector<std::string> coefficient_names(MeanStructure ms, int P, const std::vector<double>& timepoint_labels,
                                           const std::vector<std::string>& treatment_labels) {
  std::vector<std::string> names;
  const int T = static_cast<int>(timepoint_labels.size());
  auto tl = [&](int t) { return format_label(timepoint_labels[t]); };
  switch (ms) {
    case MeanStructure::ABM:
    case MeanStructure::PERIOD_BASELINE:
      for (int p = 0; p < P; ++p)
        for (int t = 0; t < T; ++t) names.push_back("p" + std::to_string(p + 1) + ":t" + tl(t));
      for (int t = 0; t < T; ++t) names.push_back("x:t" + tl(t));
      if (ms == MeanStructure::ABM)
        for (int t = 0; t < T; ++t) names.push_back("xbar:t" + tl(t));
      break;
    case MeanStructure::SIMPLE:
      for (int t = 0; t < T; ++t) names.push_back("t" + tl(t));
      names.push_back("x");
      break;
    case MeanStructure::BASELINE_BY_TREATMENT:
      for (int t = 0; t < T; ++t) names.push_back("t" + tl(t));
      for (int z = 0; z < P; ++z) names.push_back("x:z" + treatment_labels[z]);
      break;
  }
  for (int z = 1; z < P; ++z)
    for (int t = 0; t < T; ++t) names.push_back("z" + treatment_labels[z] + ":t" + tl(t));
  return names;
}

Eigen::RowVectorXd design_row_for(MeanStructure ms, int P, int T, double x, double xbar, int p, int z, int t) {
  Eigen::RowVectorXd row(design_width(ms, P, T));
  fill_design_row(row, ms, P, T, x, xbar, p, z, t);
  return row;
}

DesignInfo build_design(const TrialDataset& ds, MeanStructure ms) {
  DesignInfo info;
  const int P = ds.P, T = ds.T;
  info.k = design_width(ms, P, T);
  info.coef_names = coefficient_names(ms, P, ds.timepoint_labels, ds.treatment_labels);
  info.D.reserve(ds.n);
  Eigen::RowVectorXd row(info.k);
  for (int i = 0; i < ds.n; ++i) {
    Eigen::MatrixXd Di(P * T, info.k);
    const double xbar = ds.X.row(i).mean();
    for (int p = 0; p < P; ++p) {
      for (int t = 0; t < T; ++t) {
        fill_design_row(row, ms, P, T, ds.X(i, p), xbar, p, ds.Z(i, p), t);
        Di.row(p * T + t) = row;
      }
    }
    info.D.push_back(std::move(Di));
  }

  // Full-rank check on the stacked design.
  Eigen::MatrixXd stacked(static_cast<Eigen::Index>(ds.n) * P * T, info.k);
  for (int i = 0; i < ds.n; ++i) stacked.middleRows(static_cast<Eigen::Index>(i) * P * T, P * T) = info.D[i];
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(stacked);
  qr.setThreshold(1e-10);
  const int rank = static_cast<int>(qr.rank());
  if (rank < info.k) {
    const auto perm = qr.colsPermutation().indices();
    std::ostringstream msg;
    msg << "design matrix is rank deficient (rank " << rank << " of " << info.k << "); dependent columns:";
    for (int j = rank; j < info.k; ++j) msg << ' ' << info.coef_names[perm[j]];
    throw ValidationError(msg.str());
  }
  return info;
}

int FittedWorkingModel::coef_index(const std::string& name) const {
  for (size_t i = 0; i < coef_names.size(); ++i) {
    if (coef_names[i] == name) return static_cast<int>(i);
  }
  throw ValidationError("unknown coefficient: " + name);
}

int FittedWorkingModel::treatment_coef_index(int z, int t) const {
  if (z < 1 || z >= P || t < 0 || t >= T) throw ValidationError("treatment_coef_index out of range");
  const int k = static_cast<int>(beta.size());
  return k - (P - 1) * T + (z - 1) * T + t;
}

Eigen::RowVectorXd FittedWorkingModel::counterfactual_row(int subject, int period, int z, int t) const {
  Eigen::RowVectorXd row(beta.size());
  fill_design_row(row, mean_structure, P, T, X(subject, period), xbar[subject], period, z, t);
  return row;
}

double FittedWorkingModel::predict(int subject, int period, int z, int t) const {
  return counterfactual_row(subject, period, z, t).dot(beta);
}

double FittedWorkingModel::identity_time_norm() const {
  double worst = 0.0;
  for (int t = 0; t < T; ++t) {
    double raw = 0.0, denom = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int p = 0; p < P; ++p) {
        const double e = residuals(i, p * T + t);
        raw += e;
        denom += std::abs(e);
      }
    }
    worst = std::max(worst, std::abs(raw) / (1.0 + denom));
  }
  return worst;
}

double FittedWorkingModel::identity_treatment_norm(int z) const {
  double worst = 0.0;
  for (int t = 0; t < T; ++t) {
    double raw = 0.0, denom = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int p = 0; p < P; ++p) {
        if (Z(i, p) != z) continue;
        const double e = residuals(i, p * T + t);
        raw += e;
        denom += std::abs(e);
      }
    }
    worst = std::max(worst, std::abs(raw) / (1.0 + denom));
  }
  return worst;
}

double FittedWorkingModel::score_norm(const TrialDataset& ds) const {
  require_same_dataset(ds);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(beta.size());
  Eigen::VectorXd scale = Eigen::VectorXd::Zero(beta.size());
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd y = ds.subject_outcomes(i);
    const Eigen::VectorXd e = residuals.row(i).transpose();
    if (V.has_value()) {
      score.noalias() += D[i].transpose() * Vinv.apply(e);
      scale.noalias() += D[i].transpose() * Vinv.apply(y);
    } else {
      score.noalias() += D[i].transpose() * (dense_weight_inv * e);
      scale.noalias() += D[i].transpose() * (dense_weight_inv * y);
    }
  }
  return score.cwiseAbs().maxCoeff() / (1.0 + scale.cwiseAbs().maxCoeff());
}

void FittedWorkingModel::require_same_dataset(const TrialDataset& ds) const {
  if (ds.n != n || ds.P != P || ds.T != T || ds.X != X || ds.Z != Z) {
    throw ValidationError("model was fitted on a different dataset");
  }
}

FittedWorkingModel fit_wls(const TrialDataset& ds_in, MeanStructure ms, CovarianceStructure cs) {
  ds_in.validate();

  // All accumulations run in a canonical (id-sorted) subject order so the
  // result is a function of the subject set, bitwise independent of row
  // order; per-subject artifacts are mapped back at the end.
  std::vector<int> canon(ds_in.n);
  for (int i = 0; i < ds_in.n; ++i) canon[i] = i;
  std::stable_sort(canon.begin(), canon.end(),
                   [&](int a, int b) { return ds_in.subject_ids[a] < ds_in.subject_ids[b]; });
  TrialDataset ds = ds_in;
  for (int c = 0; c < ds_in.n; ++c) {
    const int i = canon[c];
    ds.subject_ids[c] = ds_in.subject_ids[i];
    ds.X.row(c) = ds_in.X.row(i);
    ds.Z.row(c) = ds_in.Z.row(i);
    ds.Y.row(c) = ds_in.Y.row(i);
  }

  DesignInfo di = build_design(ds, ms);
  const int n = ds.n, P = ds.P, T = ds.T, k = di.k;
  if (static_cast<long>(n) * P * T <= k) {
    throw ValidationError("not enough observations (" + std::to_string(static_cast<long>(n) * P * T) + ") for " + std::to_string(k) + " coefficients");
  }

  FittedWorkingModel m;
  m.mean_structure = ms;
  m.coef_names = di.coef_names;
  m.n = n;
  m.P = P;
  m.T = T;
  m.X = ds_in.X;
  m.Z = ds_in.Z;
  m.xbar = ds_in.X.rowwise().mean();
  m.timepoint_labels = ds.timepoint_labels;

  // OLS start via column-pivoted QR of the stacked design.
  Eigen::MatrixXd stacked(static_cast<Eigen::Index>(n) * P * T, k);
  Eigen::VectorXd y_all(static_cast<Eigen::Index>(n) * P * T);
  for (int i = 0; i < n; ++i) {
    stacked.middleRows(static_cast<Eigen::Index>(i) * P * T, P * T) = di.D[i];
    y_all.segment(static_cast<Eigen::Index>(i) * P * T, P * T) = ds.subject_outcomes(i);
  }
  Eigen::VectorXd beta = Eigen::ColPivHouseholderQR<Eigen::MatrixXd>(stacked).solve(y_all);

  Eigen::MatrixXd E(n, P * T);
  for (int i = 0; i < n; ++i) E.row(i) = (ds.subject_outcomes(i) - di.D[i] * beta).transpose();
  const double b_cap = 2.0 * E.squaredNorm() / (static_cast<double>(n) * P * T);

  const int max_iter = 100;
  bool converged = false;
  int polish_left = 6;
  double prev_step = std::numeric_limits<double>::infinity();
  std::vector<Eigen::VectorXd> cov_history;
  std::vector<CovarianceFit> used_history;
  std::optional<CovarianceFit> frozen;
  for (int iter = 1; iter <= max_iter; ++iter) {
    for (int i = 0; i < n; ++i) {
      E.row(i) = (ds.subject_outcomes(i) - di.D[i] * beta).transpose();
    }
    MomentEstimates est = estimate_covariance(E, cs, P, T);
    for (const auto& w : est.warnings) {
      if (std::find(m.warnings.begin(), m.warnings.end(), w) == m.warnings.end()) m.warnings.push_back(w);
    }
    clamp_between_period(est.fit, P, b_cap, m.warnings);

    // The moment/GLS alternation can settle into a limit cycle instead of a
    // fixed point. Damp persistent oscillations, and past iteration 90
    // freeze the weight at the average of the last cycle; the returned pair
    // still solves the estimating equation exactly for that weight.
    if (frozen.has_value()) {
      est.fit = *frozen;
    } else if (iter > 90 && used_history.size() == 3) {
      CovarianceFit avg = est.fit;
      avg.A = (used_history[0].A + used_history[1].A + used_history[2].A) / 3.0;
      avg.B = (used_history[0].B + used_history[1].B + used_history[2].B) / 3.0;
      avg.b = (used_history[0].b + used_history[1].b + used_history[2].b) / 3.0;
      avg.sigma2 = (used_history[0].sigma2 + used_history[1].sigma2 + used_history[2].sigma2) / 3.0;
      avg.rho = (used_history[0].rho + used_history[1].rho + used_history[2].rho) / 3.0;
      frozen = avg;
      est.fit = avg;
      const std::string w = "covariance iteration cycled; weight frozen at the cycle average";
      if (std::find(m.warnings.begin(), m.warnings.end(), w) == m.warnings.end()) m.warnings.push_back(w);
    } else if (iter > 60) {
      est.fit.A = 0.5 * (est.fit.A + m.covariance.A);
      est.fit.B = 0.5 * (est.fit.B + m.covariance.B);
      est.fit.b = 0.5 * (est.fit.b + m.covariance.b);
      est.fit.sigma2 = 0.5 * (est.fit.sigma2 + m.covariance.sigma2);
      est.fit.rho = 0.5 * (est.fit.rho + m.covariance.rho);
    }

    // Aitken extrapolation of the covariance-parameter sequence: the
    // moment/GLS alternation contracts geometrically, sometimes with a
    // ratio near 1 (mean structures without subject-level terms), so jump
    // to the extrapolated limit of the dominant mode every third pass.
    if (!frozen.has_value()) {
      Eigen::VectorXd v(2 * T * T);
      v << Eigen::Map<const Eigen::VectorXd>(est.fit.A.data(), T * T),
          Eigen::Map<const Eigen::VectorXd>(est.fit.B.data(), T * T);
      if (static_cast<int>(cov_history.size()) == 2 && iter % 3 == 0) {
        const Eigen::VectorXd d1 = v - cov_history[1];
        const Eigen::VectorXd d0 = cov_history[1] - cov_history[0];
        const double denom = d0.squaredNorm();
        if (denom > 0.0) {
          const double r = d1.dot(d0) / denom;
          if (std::abs(r) > 0.2 && std::abs(r) < 0.995) {
            v += d1 * (r / (1.0 - r));
            est.fit.A = Eigen::Map<const Eigen::MatrixXd>(v.data(), T, T);
            est.fit.B = Eigen::Map<const Eigen::MatrixXd>(v.data() + T * T, T, T);
            est.fit.b = (T > 1) ? est.fit.B(0, 1) : est.fit.B(0, 0);
            clamp_between_period(est.fit, P, b_cap, m.warnings);
            cov_history.clear();
          }
        }
      }
      cov_history.push_back(std::move(v));
      if (cov_history.size() > 2) cov_history.erase(cov_history.begin());
    }
    BlockExchangeableMatrix V = guarded_blocks(est.fit, P, m.warnings);
    BlockInverse Vinv = block_inverse(V);

    CompensatedMatrix Macc(k, k);
    CompensatedMatrix racc(k, 1);
    for (int i = 0; i < n; ++i) {
      const Eigen::MatrixXd WD = Vinv.apply(di.D[i]);
      Macc.add(di.D[i].transpose() * WD);
      racc.add(WD.transpose() * ds.subject_outcomes(i));
    }
    const Eigen::MatrixXd M = Macc.value();
    const Eigen::VectorXd beta_new = solve_normal_equations(M, racc.value());
    const double step = (beta_new - beta).cwiseAbs().maxCoeff();
    if (std::getenv("XOVER_TRACE_FIT")) {
      std::fprintf(stderr, "it %3d step %.3e b %.6f Atr %.4f rho %.4f s2 %.4f\n", iter, step, est.fit.b, est.fit.A.trace(), est.fit.rho, est.fit.sigma2);
    }

    beta = beta_new;
    m.covariance = est.fit;
    m.V.emplace(std::move(V));
    m.Vinv = std::move(Vinv);
    m.gram = M;
    m.iterations = iter;
    m.final_step = step;
    used_history.push_back(est.fit);
    if (used_history.size() > 3) used_history.erase(used_history.begin());

    const double scale = 1.0 + beta.cwiseAbs().maxCoeff();
    if (step < 1e-10 * scale) converged = true;
    if (converged) {
      // A few extra fixed-point iterations push beta to the floating-point
      // fixed point, making the result insensitive to the starting OLS
      // iterate (and hence to subject order).
      if (step < 5e-14 * scale || --polish_left <= 0 || step >= prev_step) break;
    }
    prev_step = step;
  }
  if (!converged) {
    throw FitError("feasible GLS did not converge within " + std::to_string(max_iter) + " iterations",
                   std::vector<double>(beta.data(), beta.data() + beta.size()));
  }

  m.beta = beta;
  m.D.resize(n);
  m.residuals.resize(n, P * T);
  for (int c = 0; c < n; ++c) {
    const int i = canon[c];
    m.residuals.row(i) = (ds.subject_outcomes(c) - di.D[c] * beta).transpose();
    m.D[i] = std::move(di.D[c]);
  }

  const double score = m.score_norm(ds_in);
  if (!(score <= 1e-8)) {
    throw FitError("estimating equation residual too large after convergence: " + std::to_string(score),
                   std::vector<double>(beta.data(), beta.data() + beta.size()));
  }
  return m;
}

FittedWorkingModel fit_gls_fixed_weight(const TrialDataset& ds, MeanStructure ms, const Eigen::MatrixXd& W) {
  ds.validate();
  DesignInfo di = build_design(ds, ms);
  const int n = ds.n, P = ds.P, T = ds.T, k = di.k;
  if (W.rows() != P * T || W.cols() != P * T) throw ValidationError("weight matrix must be PT x PT");

  Eigen::LDLT<Eigen::MatrixXd> wldlt((W + W.transpose()) / 2.0);
  if (wldlt.info() != Eigen::Success || !(wldlt.rcond() > 1e-12)) {
    throw SingularMatrixError("W", wldlt.info() == Eigen::Success ? wldlt.rcond() : 0.0);
  }
  const Eigen::MatrixXd Winv = wldlt.solve(Eigen::MatrixXd::Identity(P * T, P * T));

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd r = Eigen::VectorXd::Zero(k);
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd WD = Winv * di.D[i];
    M.noalias() += di.D[i].transpose() * WD;
    r.noalias() += WD.transpose() * ds.subject_outcomes(i);
  }
  const Eigen::VectorXd beta = solve_normal_equations(M, r);

  FittedWorkingModel m;
  m.mean_structure = ms;
  m.coef_names = di.coef_names;
  m.beta = beta;
  m.D = std::move(di.D);
  m.gram = std::move(M);
  m.dense_weight_inv = Winv;
  m.iterations = 1;
  m.final_step = 0.0;
  m.n = n;
  m.P = P;
  m.T = T;
  m.X = ds.X;
  m.Z = ds.Z;
  m.xbar = ds.X.rowwise().mean();
  m.timepoint_labels = ds.timepoint_labels;
  m.residuals.resize(n, P * T);
  for (int i = 0; i < n; ++i) {
    m.residuals.row(i) = (ds.subject_outcomes(i) - m.D[i] * beta).transpose();
  }
  return m;
}

}  // namespace xover
