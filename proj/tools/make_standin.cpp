// Regenerates the bundled synthetic example dataset (data/standin_tqt.csv)
// and its design generator (data/standin_design.json).
//
// The design mimics a four-treatment, five-timepoint QTc cross-over trial
// with a mild positive control: baselines around 402 ms that track outcomes
// with slopes near 0.8, a small between-period residual covariance, and
// within-period residual correlation decaying over neighbouring timepoints.

#include <Eigen/Dense>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "xover/sim_engine.hpp"
#include "xover/trial_data.hpp"
#include "xover/working_model.hpp"

using namespace xover;

namespace {

GeneratorModel design_generator() {
  GeneratorModel g;
  g.n = 39;
  g.timepoint_labels = {0.5, 1.0, 1.5, 2.5, 4.0};
  g.treatment_labels = {"F", "C", "D", "E"};
  const int P = 4, T = 5;

  g.baseline_mean.resize(P);
  g.baseline_mean << 402.3, 401.8, 402.6, 401.5;
  const double v_between = 140.0, v_within = 64.0;
  g.baseline_cov = v_between * Eigen::MatrixXd::Ones(P, P) + v_within * Eigen::MatrixXd::Identity(P, P);

  const double beta_x[T] = {0.68, 0.83, 0.77, 0.72, 0.68};
  const double beta_xbar[T] = {0.18, 0.10, 0.12, 0.20, 0.25};
  const double time_level[T] = {402.0, 404.0, 403.5, 402.5, 401.5};
  const double period_shift[P] = {0.0, -0.8, 0.5, 1.2};
  const double effects[3][5] = {
      {3.76, 7.95, 5.62, 3.99, 4.32},   // C
      {5.11, 9.80, 7.39, 6.05, 5.79},   // D
      {0.88, 7.16, 6.03, 6.87, 8.32},   // E (positive control)
  };

  g.coef_names = coefficient_names(MeanStructure::ABM, P, g.timepoint_labels, g.treatment_labels);
  g.coefficients.resize(static_cast<Eigen::Index>(g.coef_names.size()));
  Eigen::Index idx = 0;
  const double ref = 402.0;
  for (int p = 0; p < P; ++p) {
    for (int t = 0; t < T; ++t) {
      g.coefficients[idx++] = time_level[t] + period_shift[p] - (beta_x[t] + beta_xbar[t]) * ref;
    }
  }
  for (int t = 0; t < T; ++t) g.coefficients[idx++] = beta_x[t];
  for (int t = 0; t < T; ++t) g.coefficients[idx++] = beta_xbar[t];
  g.truth.resize(P - 1, T);
  for (int z = 1; z < P; ++z) {
    for (int t = 0; t < T; ++t) {
      g.truth(z - 1, t) = effects[z - 1][t];
      g.coefficients[idx++] = effects[z - 1][t];
    }
  }

  const double psi_diag[T] = {38.3, 27.1, 28.5, 36.2, 39.9};
  const double corr = 0.55, b = 3.0;
  Eigen::MatrixXd psi(T, T);
  for (int t = 0; t < T; ++t) {
    for (int s = 0; s < T; ++s) psi(t, s) = std::sqrt(psi_diag[t] * psi_diag[s]) * std::pow(corr, std::abs(t - s));
  }
  g.residual_B = b * Eigen::MatrixXd::Ones(T, T);
  g.residual_A = psi + g.residual_B;
  g.validate();
  return g;
}

}  // namespace

int main(int argc, char** argv) {
  // Default seed reproduces the committed data/ files bit for bit.
  std::uint64_t seed = 1054;
  std::string out_dir = "data";
  if (argc > 1) seed = std::strtoull(argv[1], nullptr, 10);
  if (argc > 2) out_dir = argv[2];

  const GeneratorModel g = design_generator();
  const TrialDataset ds = simulate_trial(g, seed);

  const std::string csv_path = out_dir + "/standin_tqt.csv";
  const std::string json_path = out_dir + "/standin_design.json";
  write_csv(ds, csv_path);
  std::ofstream(json_path) << g.to_json();
  std::cout << "wrote " << csv_path << " (n=" << ds.n << ", seed=" << seed << ") and " << json_path << "\n";
  return 0;
}
