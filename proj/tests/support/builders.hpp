#ifndef XOVER_TESTS_SUPPORT_BUILDERS_HPP
#define XOVER_TESTS_SUPPORT_BUILDERS_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "xover/rng.hpp"
#include "xover/sim_engine.hpp"
#include "xover/trial_data.hpp"

namespace xover::testing {

// Random SPD matrix with diagonal around the requested scale.
inline Eigen::MatrixXd random_spd(int T, double scale, Rng& rng) {
  Eigen::MatrixXd W(T, T);
  for (int r = 0; r < T; ++r)
    for (int c = 0; c < T; ++c) W(r, c) = rng.normal();
  Eigen::MatrixXd S = W * W.transpose() / T;
  S += 0.25 * Eigen::MatrixXd::Identity(T, T);
  return scale * S;
}

// Random (A, B) pair that keeps A - B and A + (P-1)B safely positive
// definite: A gets a diagonal bump dominating the spectral radius of B.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> random_block_pair(int T, Rng& rng, bool constant_b = false) {
  Eigen::MatrixXd B = constant_b ? Eigen::MatrixXd(0.3 * Eigen::MatrixXd::Ones(T, T))
                                 : Eigen::MatrixXd(0.4 * random_spd(T, 1.0, rng));
  Eigen::MatrixXd A = random_spd(T, 3.0, rng);
  A += (1.0 + B.cwiseAbs().sum()) * Eigen::MatrixXd::Identity(T, T);
  return {A, B};
}

// Seeded generator model of arbitrary shape for property sweeps.
inline GeneratorModel make_test_generator(int n, int P, int T, std::uint64_t seed) {
  Rng rng(seed);
  GeneratorModel g;
  g.n = n;
  for (int t = 0; t < T; ++t) g.timepoint_labels.push_back(0.5 + 0.75 * t);
  g.treatment_labels.push_back("PBO");
  for (int z = 1; z < P; ++z) g.treatment_labels.push_back("T" + std::to_string(z));

  g.baseline_mean = Eigen::VectorXd::Constant(P, 400.0);
  for (int p = 0; p < P; ++p) g.baseline_mean[p] += rng.normal();
  const double v_between = 100.0 + 40.0 * rng.uniform01();
  const double v_within = 30.0 + 30.0 * rng.uniform01();
  g.baseline_cov = v_between * Eigen::MatrixXd::Ones(P, P) + v_within * Eigen::MatrixXd::Identity(P, P);

  g.coef_names = coefficient_names(MeanStructure::ABM, P, g.timepoint_labels, g.treatment_labels);
  g.coefficients.resize(static_cast<Eigen::Index>(g.coef_names.size()));
  Eigen::Index idx = 0;
  for (int p = 0; p < P; ++p)
    for (int t = 0; t < T; ++t) g.coefficients[idx++] = 100.0 + 3.0 * rng.normal();
  for (int t = 0; t < T; ++t) g.coefficients[idx++] = 0.3 + 0.5 * rng.uniform01();  // x:t
  for (int t = 0; t < T; ++t) g.coefficients[idx++] = 0.2 + 0.4 * rng.uniform01();  // xbar:t
  g.truth.resize(P - 1, T);
  for (int z = 1; z < P; ++z) {
    for (int t = 0; t < T; ++t) {
      const double effect = -2.0 + 12.0 * rng.uniform01();
      g.truth(z - 1, t) = effect;
      g.coefficients[idx++] = effect;
    }
  }

  const double b = 2.0 + 6.0 * rng.uniform01();
  g.residual_A = random_spd(T, 35.0, rng) + b * Eigen::MatrixXd::Ones(T, T);
  g.residual_B = b * Eigen::MatrixXd::Ones(T, T);
  g.validate();
  return g;
}

// Small deterministic dataset built directly (no file involved).
inline TrialDataset make_tiny_dataset(int n, int P, int T, std::uint64_t seed) {
  return simulate_trial(make_test_generator(n, P, T, seed), seed + 1);
}

}  // namespace xover::testing

#endif
