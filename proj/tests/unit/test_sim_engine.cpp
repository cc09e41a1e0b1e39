#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "support/builders.hpp"
#include "xover/causal_estimators.hpp"
#include "xover/errors.hpp"
#include "xover/sim_engine.hpp"

using namespace xover;

TEST_CASE("simulate_trial is deterministic in the seed") {
  const GeneratorModel g = testing::make_test_generator(12, 4, 3, 1001);
  const TrialDataset a = simulate_trial(g, 42);
  const TrialDataset b = simulate_trial(g, 42);
  CHECK(a.X == b.X);
  CHECK(a.Z == b.Z);
  CHECK(a.Y == b.Y);
  const TrialDataset c = simulate_trial(g, 43);
  CHECK(a.Y != c.Y);
}

TEST_CASE("degenerate generator reproduces conditional means exactly") {
  GeneratorModel g = testing::make_test_generator(6, 3, 2, 1002);
  g.baseline_cov.setZero();
  g.residual_A.setZero();
  g.residual_B.setZero();
  // Flatten baseline means and period effects so the per-subject paired
  // contrast is constant and mu1 is exact, not just unbiased.
  g.baseline_mean.setConstant(400.0);
  for (int p = 1; p < g.P(); ++p) {
    for (int t = 0; t < g.T(); ++t) {
      g.coefficients[p * g.T() + t] = g.coefficients[t];
    }
  }
  const TrialDataset ds = simulate_trial(g, 7);
  for (int i = 0; i < ds.n; ++i) {
    CHECK(ds.X(i, 0) == doctest::Approx(g.baseline_mean[0]).epsilon(1e-12));
    const double xbar = ds.X.row(i).mean();
    for (int p = 0; p < ds.P; ++p) {
      for (int t = 0; t < ds.T; ++t) {
        const double mean = design_row_for(MeanStructure::ABM, ds.P, ds.T, ds.X(i, p), xbar, p, ds.Z(i, p), t).dot(g.coefficients);
        CHECK(ds.y(i, p, t) == doctest::Approx(mean).epsilon(1e-12));
      }
    }
  }
  // Any estimator recovers the truth exactly on noise-free data.
  for (int z = 1; z < ds.P; ++z) {
    const auto est = mu1(ds, z);
    for (int t = 0; t < ds.T; ++t) {
      CHECK(est[t].estimate == doctest::Approx(g.truth(z - 1, t)).epsilon(1e-10));
    }
  }
}

TEST_CASE("treatment sequences are permutations under both rules") {
  for (SequenceRule rule : {SequenceRule::UNIFORM_PERMUTATION, SequenceRule::WILLIAMS_SQUARE}) {
    for (int P : {2, 3, 4, 5}) {
      GeneratorModel g = testing::make_test_generator(20, P, 2, 1100 + P);
      g.sequence_rule = rule;
      const TrialDataset ds = simulate_trial(g, 11);
      ds.validate();  // includes the permutation check
    }
  }
}

TEST_CASE("generator JSON round trip") {
  const GeneratorModel g = testing::make_test_generator(15, 3, 4, 1003);
  const std::string text = g.to_json();
  const GeneratorModel back = GeneratorModel::from_json(text);
  CHECK(back.n == g.n);
  CHECK(back.baseline_mean == g.baseline_mean);
  CHECK(back.baseline_cov == g.baseline_cov);
  CHECK(back.coefficients == g.coefficients);
  CHECK(back.residual_A == g.residual_A);
  CHECK(back.residual_B == g.residual_B);
  CHECK(back.truth == g.truth);
  CHECK(back.timepoint_labels == g.timepoint_labels);
  CHECK(back.treatment_labels == g.treatment_labels);
  CHECK(back.sequence_rule == g.sequence_rule);
  CHECK_THROWS_AS(GeneratorModel::from_json("{not json"), ValidationError);
  CHECK_THROWS_AS(GeneratorModel::from_json("{}"), ValidationError);
}

TEST_CASE("fit_generator round trip recovers baseline moments at large n") {
  const GeneratorModel g0 = testing::make_test_generator(4000, 3, 2, 1004);
  const TrialDataset big = simulate_trial(g0, 99);
  const GeneratorModel g1 = fit_generator(big);
  // Mean recovery within 3 Monte Carlo standard errors.
  for (int p = 0; p < g0.P(); ++p) {
    const double mc_se = std::sqrt(g0.baseline_cov(p, p) / big.n);
    CHECK(std::abs(g1.baseline_mean[p] - g0.baseline_mean[p]) <= 3.5 * mc_se);
  }
  // Treatment-effect truth recovery: the fitted coefficients are consistent.
  for (int z = 1; z < g0.P(); ++z) {
    for (int t = 0; t < g0.T(); ++t) {
      CHECK(std::abs(g1.truth(z - 1, t) - g0.truth(z - 1, t)) <= 1.0);
    }
  }
}

TEST_CASE("large single replicate: mu1 lands on the generator truth") {
  const GeneratorModel g0 = testing::make_test_generator(10000, 4, 2, 1005);
  const TrialDataset big = simulate_trial(g0, 123);
  // Monte Carlo standard error bound for the non-parametric estimator.
  const auto est = mu1(big, 3);
  for (int t = 0; t < big.T; ++t) {
    CHECK(std::abs(est[t].estimate - g0.truth(2, t)) <= 4.0 * est[t].se);
  }
}

TEST_CASE("run_study aggregates and stays deterministic across worker counts") {
  GeneratorModel g = testing::make_test_generator(10, 2, 2, 1006);
  SimulationConfig cfg;
  cfg.replicates = 40;
  cfg.seed = 2718;
  cfg.configs = {{false, MeanStructure::SIMPLE, CovarianceStructure::INDEPENDENCE}, {true, MeanStructure::ABM, CovarianceStructure::UNSTRUCTURED}};
  cfg.workers = 1;
  const SimulationReport a = run_study(g, cfg);
  cfg.workers = 8;
  const SimulationReport b = run_study(g, cfg);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.failed_replicates == 0);
  CHECK(a.max_theorem1_gap <= 1e-8);

  // Cells exist for every configuration and are sane.
  for (size_t c = 0; c < cfg.configs.size(); ++c) {
    for (int z = 1; z < g.P(); ++z) {
      for (int t = 0; t < g.T(); ++t) {
        const SimulationCell& cell = a.cell(static_cast<int>(c), z, t);
        CHECK(cell.sd >= 0.0);
        CHECK(cell.coverage >= 0.0);
        CHECK(cell.coverage <= 1.0);
        CHECK(std::isfinite(cell.bias));
      }
    }
  }
}

TEST_CASE("null generator: small-R bias bound") {
  GeneratorModel g = testing::make_test_generator(12, 3, 2, 1007);
  g.truth.setZero();
  // Zero out the treatment coefficients so the truth table is honest.
  const auto names = g.coef_names;
  for (size_t j = 0; j < names.size(); ++j) {
    if (names[j].rfind("z", 0) == 0) g.coefficients[static_cast<Eigen::Index>(j)] = 0.0;
  }
  SimulationConfig cfg;
  cfg.replicates = 200;
  cfg.seed = 31415;
  cfg.configs = {{false, MeanStructure::SIMPLE, CovarianceStructure::INDEPENDENCE}, {true, MeanStructure::ABM, CovarianceStructure::UNSTRUCTURED}};
  const SimulationReport rep = run_study(g, cfg);
  for (size_t c = 0; c < cfg.configs.size(); ++c) {
    for (int z = 1; z < g.P(); ++z) {
      for (int t = 0; t < g.T(); ++t) {
        const SimulationCell& cell = rep.cell(static_cast<int>(c), z, t);
        CHECK(std::abs(cell.bias) <= 4.0 * cell.sd / std::sqrt(static_cast<double>(cfg.replicates)));
      }
    }
  }
}

TEST_CASE("simulation config validation") {
  SimulationConfig cfg;
  cfg.replicates = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.replicates = 10;
  cfg.configs.clear();
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("fit_generator proceeds on zero-residual data via the SPD floor") {
  // Outcomes generated exactly from an ABM relationship: the fitted
  // residual covariance is degenerate and gets floored, not rejected.
  TrialDataset ds = testing::make_tiny_dataset(14, 3, 2, 1008);
  const FittedWorkingModel gen = fit_wls(ds, MeanStructure::ABM, CovarianceStructure::UNSTRUCTURED);
  for (int i = 0; i < ds.n; ++i) {
    for (int p = 0; p < ds.P; ++p) {
      for (int t = 0; t < ds.T; ++t) {
        ds.Y(i, p * ds.T + t) = gen.counterfactual_row(i, p, ds.Z(i, p), t).dot(gen.beta);
      }
    }
  }
  const GeneratorModel g = fit_generator(ds);
  CHECK(g.residual_A.trace() < 1e-5);
  CHECK(g.residual_A.trace() > 0.0);
  // The degenerate generator still simulates (outcomes equal the means).
  const TrialDataset sim = simulate_trial(g, 3);
  CHECK(sim.n == ds.n);
}
