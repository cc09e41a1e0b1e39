#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "support/builders.hpp"
#include "xover/causal_estimators.hpp"
#include "xover/errors.hpp"
#include "xover/stats.hpp"

using namespace xover;

namespace {

double theorem_gap(const FittedWorkingModel& m, const TrialDataset& ds) {
  double worst = 0.0;
  for (int z = 1; z < ds.P; ++z) {
    const auto e2 = mu2(m, ds, z);
    const auto e3 = mu3(m, ds, z);
    for (int t = 0; t < ds.T; ++t) {
      worst = std::max(worst, std::abs(e2[t].estimate - e3[t].estimate) / (1.0 + std::abs(e2[t].estimate)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("mu1 vanishes when outcomes ignore treatment") {
  TrialDataset ds = testing::make_tiny_dataset(9, 3, 2, 301);
  for (int i = 0; i < ds.n; ++i) {
    for (int p = 0; p < ds.P; ++p) {
      for (int t = 0; t < ds.T; ++t) ds.Y(i, p * ds.T + t) = 400.0 + 3.0 * i + t;
    }
  }
  for (int z = 1; z < ds.P; ++z) {
    for (const auto& e : mu1(ds, z)) CHECK(std::abs(e.estimate) < 1e-12);
  }
}

TEST_CASE("mu1 rejects the placebo-vs-placebo contrast") {
  const TrialDataset ds = testing::make_tiny_dataset(5, 2, 1, 302);
  CHECK_THROWS_AS(mu1(ds, 0), ValidationError);
  CHECK_THROWS_AS(mu1(ds, 2), ValidationError);
}

TEST_CASE("effect estimate invariants: centering, SE, CI") {
  const TrialDataset ds = testing::make_tiny_dataset(11, 3, 2, 303);
  const FittedWorkingModel m = fit_wls(ds, MeanStructure::SIMPLE, CovarianceStructure::AR1);
  for (int z = 1; z < ds.P; ++z) {
    const std::vector<std::vector<EffectEstimate>> batches = {mu1(ds, z), mu3(m, ds, z)};
    for (const auto& batch : batches) {
      for (const auto& e : batch) {
        CHECK(std::abs(e.influence.mean()) <= 1e-8);
        const double se2 = e.influence.squaredNorm() / (static_cast<double>(ds.n) * (ds.n - 1));
        CHECK(e.se == doctest::Approx(std::sqrt(se2)).epsilon(1e-12));
        const double q = t_quantile(0.975, ds.n - 1);
        CHECK(e.ci_lower == doctest::Approx(e.estimate - q * e.se).epsilon(1e-12));
        CHECK(e.ci_upper == doctest::Approx(e.estimate + q * e.se).epsilon(1e-12));
        CHECK(e.df == ds.n - 1);
      }
    }
  }
}

TEST_CASE("theorem equality: mu2 equals mu3 for every structure pair") {
  int idx = 0;
  for (MeanStructure ms : {MeanStructure::ABM, MeanStructure::PERIOD_BASELINE, MeanStructure::SIMPLE, MeanStructure::BASELINE_BY_TREATMENT}) {
    for (CovarianceStructure cs : {CovarianceStructure::UNSTRUCTURED, CovarianceStructure::AR1, CovarianceStructure::INDEPENDENCE}) {
      const TrialDataset ds = testing::make_tiny_dataset(12, 4, 3, 400 + idx++);
      const FittedWorkingModel m = fit_wls(ds, ms, cs);
      CHECK(theorem_gap(m, ds) <= 1e-8);
    }
  }
}

TEST_CASE("mu2 equals the treatment coefficient for main-effect structures") {
  const TrialDataset ds = testing::make_tiny_dataset(10, 3, 2, 305);
  for (MeanStructure ms : {MeanStructure::ABM, MeanStructure::PERIOD_BASELINE, MeanStructure::SIMPLE}) {
    const FittedWorkingModel m = fit_wls(ds, ms, CovarianceStructure::UNSTRUCTURED);
    for (int z = 1; z < ds.P; ++z) {
      const auto est = mu2(m, ds, z);
      for (int t = 0; t < ds.T; ++t) {
        CHECK(std::abs(est[t].estimate - m.beta[m.treatment_coef_index(z, t)]) <= 1e-12 * (1.0 + std::abs(est[t].estimate)));
      }
    }
  }
}

TEST_CASE("mu3 equals mu1 when the model is identically zero") {
  const TrialDataset ds = testing::make_tiny_dataset(9, 3, 2, 306);
  FittedWorkingModel m = fit_wls(ds, MeanStructure::SIMPLE, CovarianceStructure::INDEPENDENCE);
  m.beta.setZero();
  for (int i = 0; i < ds.n; ++i) m.residuals.row(i) = ds.Y.row(i);
  for (int z = 1; z < ds.P; ++z) {
    const auto e3 = mu3(m, ds, z);
    const auto e1 = mu1(ds, z);
    for (int t = 0; t < ds.T; ++t) {
      CHECK(e3[t].estimate == doctest::Approx(e1[t].estimate).epsilon(1e-13));
      CHECK((e3[t].influence - e1[t].influence).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("mu3 against a hand-enumerated n=2, P=2, T=1 oracle") {
  // Fixed tiny instance with a fixed beta: enumerate all 2x2 terms by hand.
  TrialDataset ds;
  ds.n = 2;
  ds.P = 2;
  ds.T = 1;
  ds.timepoint_labels = {1.0};
  ds.treatment_labels = {"PBO", "ACT"};
  ds.subject_ids = {"u", "v"};
  ds.X.resize(2, 2);
  ds.X << 10.0, 12.0, 9.0, 11.0;
  ds.Z.resize(2, 2);
  ds.Z << 1, 0, 0, 1;
  ds.Y.resize(2, 2);
  ds.Y << 25.0, 18.0, 16.0, 24.0;

  FittedWorkingModel m = fit_wls(ds, MeanStructure::SIMPLE, CovarianceStructure::INDEPENDENCE);
  m.beta << 2.0, 1.0, 3.0;  // t-intercept 2, slope 1, effect 3
  for (int i = 0; i < ds.n; ++i) {
    for (int p = 0; p < ds.P; ++p) {
      m.residuals(i, p) = ds.Y(i, p) - m.predict(i, p, ds.Z(i, p), 0);
    }
  }

  // mu1 = mean_i sum_p [I(z)Y - I(0)Y] = ((25-18) + (24-16))/2 = 7.5.
  // h(x,1) - h(x,0) = 3 for both periods, so the augmentation term is
  // sum_p (I(z) - 1/2)*h(x,1) - (I(0) - 1/2)*h(x,0):
  //  subject u: (1-.5)(2+10+3) - (0-.5)(2+10) + (0-.5)(2+12+3) - (1-.5)(2+12)
  //           = 7.5 + 6 - 8.5 - 7 = -2
  //  subject v: (0-.5)(2+9+3) - (1-.5)(2+9) + (1-.5)(2+11+3) - (0-.5)(2+11)
  //           = -7 - 5.5 + 8 + 6.5 = 2
  // mean augmentation = 0, so mu3 = 7.5.
  const auto e3 = mu3(m, ds, 1);
  CHECK(e3[0].estimate == doctest::Approx(7.5).epsilon(1e-12));
  const auto e1 = mu1(ds, 1);
  CHECK(e1[0].estimate == doctest::Approx(7.5).epsilon(1e-12));
}

TEST_CASE("influence_mu2: first term vanishes for main-effect structures") {
  const TrialDataset ds = testing::make_tiny_dataset(10, 3, 2, 307);
  const FittedWorkingModel m = fit_wls(ds, MeanStructure::PERIOD_BASELINE, CovarianceStructure::UNSTRUCTURED);
  // With the covariate term identically zero, the influence is G psi, whose
  // sample mean vanishes because the estimating equation holds.
  const Eigen::VectorXd phi = influence_mu2(m, ds, 1, 0);
  CHECK(std::abs(phi.mean()) <= 1e-8);
  // Check the decomposition directly: gcomp summand minus estimate is 0.
  const auto est = mu2(m, ds, 1);
  for (int i = 0; i < ds.n; ++i) {
    double g = 0.0;
    for (int p = 0; p < ds.P; ++p) g += m.predict(i, p, 1, 0) - m.predict(i, p, 0, 0);
    g /= ds.P;
    CHECK(g == doctest::Approx(est[0].estimate).epsilon(1e-10));
  }
}

TEST_CASE("noise-free fit: psi vanishes and the two influence routes agree") {
  // Noise-free data from a baseline-by-treatment truth: residuals are zero
  // after the fit, psi is identically zero, and the mu2 influence reduces to
  // the covariate term, which equals the mu3 influence exactly.
  TrialDataset ds = testing::make_tiny_dataset(10, 3, 2, 308);
  FittedWorkingModel gen = fit_wls(ds, MeanStructure::BASELINE_BY_TREATMENT, CovarianceStructure::INDEPENDENCE);
  Eigen::VectorXd truth_beta = gen.beta;
  for (int i = 0; i < ds.n; ++i) {
    for (int p = 0; p < ds.P; ++p) {
      for (int t = 0; t < ds.T; ++t) {
        ds.Y(i, p * ds.T + t) = gen.counterfactual_row(i, p, ds.Z(i, p), t).dot(truth_beta);
      }
    }
  }
  const FittedWorkingModel m = fit_wls(ds, MeanStructure::BASELINE_BY_TREATMENT, CovarianceStructure::INDEPENDENCE);
  CHECK(m.residuals.cwiseAbs().maxCoeff() < 1e-8);
  for (int z = 1; z < ds.P; ++z) {
    for (int t = 0; t < ds.T; ++t) {
      const Eigen::VectorXd phi2 = influence_mu2(m, ds, z, t);
      const Eigen::VectorXd phi3 = influence_mu3(m, ds, z, t);
      const double v2 = phi2.squaredNorm();
      const double v3 = phi3.squaredNorm();
      if (v3 > 0.0) CHECK(std::abs(v2 - v3) / v3 <= 1e-6);
      CHECK((phi2 - phi3).cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + phi3.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("influence routes agree asymptotically on noisy data") {
  const TrialDataset ds = testing::make_tiny_dataset(800, 2, 2, 309);
  const FittedWorkingModel m = fit_wls(ds, MeanStructure::SIMPLE, CovarianceStructure::INDEPENDENCE);
  const Eigen::VectorXd phi2 = influence_mu2(m, ds, 1, 1);
  const Eigen::VectorXd phi3 = influence_mu3(m, ds, 1, 1);
  const double v2 = phi2.squaredNorm() / (ds.n - 1);
  const double v3 = phi3.squaredNorm() / (ds.n - 1);
  CHECK(std::abs(v2 - v3) / v3 < 0.15);
}

TEST_CASE("joint effect matches an outer-product oracle") {
  const TrialDataset ds = testing::make_tiny_dataset(13, 3, 3, 310);
  const FittedWorkingModel m = fit_wls(ds, MeanStructure::SIMPLE, CovarianceStructure::UNSTRUCTURED);
  const auto est = mu2(m, ds, 2);
  const JointEffect je = joint_effect(est);
  REQUIRE(je.coords.size() == static_cast<size_t>(ds.T));

  for (int a = 0; a < ds.T; ++a) {
    CHECK(je.covariance(a, a) == doctest::Approx(est[a].se * est[a].se).epsilon(1e-12));
    for (int b = 0; b < ds.T; ++b) {
      double acc = 0.0;
      for (int i = 0; i < ds.n; ++i) acc += est[a].influence[i] * est[b].influence[i];
      acc /= static_cast<double>(ds.n) * (ds.n - 1);
      CHECK(je.covariance(a, b) == doctest::Approx(acc).epsilon(1e-12));
    }
  }

  // Positive semidefinite.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(je.covariance);
  CHECK(es.eigenvalues().minCoeff() >= -1e-12 * es.eigenvalues().cwiseAbs().maxCoeff());
}

TEST_CASE("joint effect trivial cases and errors") {
  const TrialDataset ds = testing::make_tiny_dataset(8, 2, 2, 311);
  const auto est = mu1(ds, 1);
  const JointEffect single = joint_effect({est[0]});
  CHECK(single.covariance.rows() == 1);
  CHECK(single.covariance(0, 0) == doctest::Approx(est[0].se * est[0].se));

  // Identical influence vectors give a rank-1, correlation-1 matrix.
  const JointEffect twin = joint_effect({est[0], est[0]});
  const double corr = twin.covariance(0, 1) / std::sqrt(twin.covariance(0, 0) * twin.covariance(1, 1));
  CHECK(corr == doctest::Approx(1.0).epsilon(1e-12));

  EffectEstimate other = est[0];
  other.influence = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(joint_effect({est[0], other}), ValidationError);
  CHECK_THROWS_AS(joint_effect({}), ValidationError);
}

TEST_CASE("mu2 vanishes when treatment coefficients are zeroed") {
  const TrialDataset ds = testing::make_tiny_dataset(10, 3, 2, 312);
  for (CovarianceStructure cs : {CovarianceStructure::UNSTRUCTURED, CovarianceStructure::INDEPENDENCE}) {
    FittedWorkingModel m = fit_wls(ds, MeanStructure::SIMPLE, cs);
    for (int z = 1; z < ds.P; ++z) {
      for (int t = 0; t < ds.T; ++t) m.beta[m.treatment_coef_index(z, t)] = 0.0;
    }
    for (int i = 0; i < ds.n; ++i) {
      for (int p = 0; p < ds.P; ++p) {
        for (int t = 0; t < ds.T; ++t) m.residuals(i, p * ds.T + t) = ds.y(i, p, t) - m.predict(i, p, ds.Z(i, p), t);
      }
    }
    for (int z = 1; z < ds.P; ++z) {
      for (const auto& e : mu2(m, ds, z)) CHECK(std::abs(e.estimate) < 1e-12);
    }
  }
}
