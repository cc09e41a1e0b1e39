#include "xover/sim_engine.hpp"

#include <Eigen/Dense>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "xover/causal_estimators.hpp"
#include "xover/errors.hpp"
#include "xover/rng.hpp"
#include "xover/stats.hpp"

namespace xover {

using nlohmann::json;

const char* to_string(SequenceRule r) {
  return r == SequenceRule::UNIFORM_PERMUTATION ? "uniform-permutation" : "williams-square";
}

SequenceRule sequence_rule_from_string(const std::string& s) {
  if (s == "uniform-permutation") return SequenceRule::UNIFORM_PERMUTATION;
  if (s == "williams-square") return SequenceRule::WILLIAMS_SQUARE;
  throw ValidationError("unknown sequence rule: " + s);
}

void GeneratorModel::validate() const {
  const int P_ = P(), T_ = T();
  if (P_ < 2) throw ValidationError("generator needs at least two periods");
  if (T_ < 1) throw ValidationError("generator needs at least one timepoint");
  if (n < 1) throw ValidationError("generator n must be positive");
  if (baseline_cov.rows() != P_ || baseline_cov.cols() != P_) throw ValidationError("baseline covariance must be P x P");
  if (residual_A.rows() != T_ || residual_A.cols() != T_ || residual_B.rows() != T_ || residual_B.cols() != T_) {
    throw ValidationError("residual blocks must be T x T");
  }
  if (truth.rows() != P_ - 1 || truth.cols() != T_) throw ValidationError("truth table must be (P-1) x T");
  if (!truth.allFinite() || !coefficients.allFinite() || !baseline_mean.allFinite()) {
    throw ValidationError("generator has non-finite parameters");
  }
  if (static_cast<int>(treatment_labels.size()) != P_) throw ValidationError("treatment label count mismatch");
  const auto expected = coefficient_names(MeanStructure::ABM, P_, timepoint_labels, treatment_labels);
  if (coef_names != expected || coefficients.size() != static_cast<Eigen::Index>(expected.size())) {
    throw ValidationError("generator coefficients do not match the ABM layout");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(baseline_cov);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-8 * scale) throw ValidationError("baseline covariance is not positive semidefinite");
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& M) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.empty()) throw ValidationError(std::string("bad matrix field: ") + what);
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd M(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[r].size()) != cols) throw ValidationError(std::string("ragged matrix field: ") + what);
    for (Eigen::Index c = 0; c < cols; ++c) M(r, c) = j[r][c].get<double>();
  }
  return M;
}

Eigen::VectorXd vector_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw ValidationError(std::string("bad vector field: ") + what);
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

// Symmetric factor for sampling; falls back to an eigenvalue-floored
// projection when the Cholesky fails (degenerate covariances are allowed
// for sampling, e.g. a zero residual matrix).
Eigen::MatrixXd sampling_factor(const Eigen::MatrixXd& cov, const char* what) {
  Eigen::MatrixXd S = (cov + cov.transpose()) / 2.0;
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  Eigen::VectorXd ev = es.eigenvalues();
  bool warned = false;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < 0.0) {
      ev[i] = 0.0;
      warned = true;
    }
  }
  if (warned) std::cerr << "xover: " << what << " not SPD; sampling from floored projection\n";
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
}

// Williams square row: balanced first-order sequence starting from
// 0, 1, P-1, 2, P-2, ...; row r adds r cyclically. Odd P uses the mirrored
// square for half the assignments.
std::vector<int> williams_sequence(int P, int row, bool mirrored) {
  std::vector<int> base(P);
  int lo = 1, hi = P - 1;
  base[0] = 0;
  for (int j = 1; j < P; ++j) {
    base[j] = (j % 2 == 1) ? lo++ : hi--;
  }
  if (mirrored) std::reverse(base.begin(), base.end());
  std::vector<int> seq(P);
  for (int j = 0; j < P; ++j) seq[j] = (base[j] + row) % P;
  return seq;
}

}  // namespace

std::string GeneratorModel::to_json() const {
  json j;
  j["n"] = n;
  j["sequence_rule"] = std::string(xover::to_string(sequence_rule));
  j["timepoints"] = timepoint_labels;
  j["treatments"] = treatment_labels;
  j["baseline_mean"] = std::vector<double>(baseline_mean.data(), baseline_mean.data() + baseline_mean.size());
  j["baseline_cov"] = matrix_to_json(baseline_cov);
  json coefs = json::object();
  for (size_t i = 0; i < coef_names.size(); ++i) coefs[coef_names[i]] = coefficients[static_cast<Eigen::Index>(i)];
  j["coefficients"] = std::move(coefs);
  j["A"] = matrix_to_json(residual_A);
  j["B"] = matrix_to_json(residual_B);
  j["truth"] = matrix_to_json(truth);
  return j.dump(2) + "\n";
}

GeneratorModel GeneratorModel::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("generator JSON parse failure: ") + e.what());
  }
  GeneratorModel g;
  try {
    g.n = j.at("n").get<int>();
    g.sequence_rule = sequence_rule_from_string(j.at("sequence_rule").get<std::string>());
    g.timepoint_labels = j.at("timepoints").get<std::vector<double>>();
    g.treatment_labels = j.at("treatments").get<std::vector<std::string>>();
    g.baseline_mean = vector_from_json(j.at("baseline_mean"), "baseline_mean");
    g.baseline_cov = matrix_from_json(j.at("baseline_cov"), "baseline_cov");
    g.residual_A = matrix_from_json(j.at("A"), "A");
    g.residual_B = matrix_from_json(j.at("B"), "B");
    g.truth = matrix_from_json(j.at("truth"), "truth");
    g.coef_names = coefficient_names(MeanStructure::ABM, g.P(), g.timepoint_labels, g.treatment_labels);
    const json& coefs = j.at("coefficients");
    g.coefficients.resize(static_cast<Eigen::Index>(g.coef_names.size()));
    for (size_t i = 0; i < g.coef_names.size(); ++i) {
      g.coefficients[static_cast<Eigen::Index>(i)] = coefs.at(g.coef_names[i]).get<double>();
    }
    if (coefs.size() != g.coef_names.size()) throw ValidationError("generator JSON has unexpected coefficients");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("generator JSON field failure: ") + e.what());
  }
  g.validate();
  return g;
}

GeneratorModel fit_generator(const TrialDataset& ds) {
  ds.validate();
  GeneratorModel g;
  g.n = ds.n;
  g.timepoint_labels = ds.timepoint_labels;
  g.treatment_labels = ds.treatment_labels;

  g.baseline_mean = ds.X.colwise().mean().transpose();
  Eigen::MatrixXd centered = ds.X.rowwise() - g.baseline_mean.transpose();
  g.baseline_cov = centered.transpose() * centered / std::max(1.0, static_cast<double>(ds.n - 1));
  {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.baseline_cov);
    const double floor = 1e-8 * std::max(1.0, g.baseline_cov.trace() / ds.P);
    if (es.eigenvalues().minCoeff() < floor) {
      Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
      g.baseline_cov = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
      std::cerr << "xover: baseline covariance floored to SPD\n";
    }
  }

  FittedWorkingModel m = fit_wls(ds, MeanStructure::ABM, CovarianceStructure::UNSTRUCTURED);
  for (const auto& w : m.warnings) std::cerr << "xover: generator fit: " << w << "\n";
  g.coefficients = m.beta;
  g.coef_names = m.coef_names;
  g.residual_A = m.covariance.A;
  g.residual_B = m.covariance.B;
  g.truth.resize(ds.P - 1, ds.T);
  for (int z = 1; z < ds.P; ++z) {
    for (int t = 0; t < ds.T; ++t) g.truth(z - 1, t) = m.beta[m.treatment_coef_index(z, t)];
  }
  g.validate();
  return g;
}

TrialDataset simulate_trial(const GeneratorModel& g, std::uint64_t seed) {
  g.validate();
  const int P = g.P(), T = g.T(), n = g.n;
  const Eigen::MatrixXd Lx = sampling_factor(g.baseline_cov, "baseline covariance");
  // Expand the residual blocks by hand: degenerate covariances (including
  // all-zero residuals) are legal for sampling.
  Eigen::MatrixXd V(P * T, P * T);
  for (int p = 0; p < P; ++p) {
    for (int q = 0; q < P; ++q) V.block(p * T, q * T, T, T) = (p == q) ? g.residual_A : g.residual_B;
  }
  const Eigen::MatrixXd Le = sampling_factor(V, "residual covariance");

  TrialDataset ds;
  ds.n = n;
  ds.P = P;
  ds.T = T;
  ds.timepoint_labels = g.timepoint_labels;
  ds.treatment_labels = g.treatment_labels;
  ds.subject_ids.reserve(n);
  ds.X.resize(n, P);
  ds.Z.resize(n, P);
  ds.Y.resize(n, static_cast<Eigen::Index>(P) * T);

  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    ds.subject_ids.push_back("s" + std::to_string(i + 1));
    const Eigen::VectorXd x = g.baseline_mean + Lx * rng.normal_vector(P);
    ds.X.row(i) = x.transpose();

    std::vector<int> seq;
    if (g.sequence_rule == SequenceRule::UNIFORM_PERMUTATION) {
      seq = rng.permutation(P);
    } else {
      const int row = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(P)));
      const bool mirrored = (P % 2 == 1) && (rng.uniform_below(2) == 1);
      seq = williams_sequence(P, row, mirrored);
    }
    for (int p = 0; p < P; ++p) ds.Z(i, p) = seq[p];

    const double xbar = x.mean();
    Eigen::VectorXd mean(P * T);
    for (int p = 0; p < P; ++p) {
      for (int t = 0; t < T; ++t) {
        mean[p * T + t] = design_row_for(MeanStructure::ABM, P, T, x[p], xbar, p, seq[p], t).dot(g.coefficients);
      }
    }
    ds.Y.row(i) = (mean + Le * rng.normal_vector(P * T)).transpose();
  }
  ds.validate();
  return ds;
}

void SimulationConfig::validate() const {
  if (replicates < 1) throw ValidationError("replicate count must be positive");
  if (configs.empty()) throw ValidationError("no estimator configurations requested");
  if (!(ci_level > 0.0 && ci_level < 1.0)) throw ValidationError("ci level must be in (0, 1)");
  if (workers < 1) throw ValidationError("worker count must be positive");
}

const SimulationCell& SimulationReport::cell(int config, int z, int t) const {
  const int T = static_cast<int>(timepoint_labels.size());
  return cells.at(config).at(static_cast<size_t>(z - 1) * T + t);
}

std::string SimulationReport::to_json() const {
  json j;
  j["replicates"] = replicates;
  j["seed"] = seed;
  j["failed_replicates"] = failed_replicates;
  j["max_theorem1_gap"] = max_theorem1_gap;
  j["treatments"] = treatment_labels;
  j["timepoints"] = timepoint_labels;
  json results = json::array();
  for (size_t c = 0; c < configs.size(); ++c) {
    json jc;
    jc["estimator"] = configs[c].nonparametric ? "mu1" : "mu2";
    if (!configs[c].nonparametric) {
      jc["mean"] = std::string(xover::to_string(configs[c].mean));
      jc["cov"] = std::string(xover::to_string(configs[c].cov));
    }
    json jcells = json::array();
    for (const auto& cell : cells[c]) {
      json e;
      e["treatment"] = treatment_labels[cell.treatment];
      e["time"] = timepoint_labels[cell.time];
      e["truth"] = cell.truth;
      e["bias"] = cell.bias;
      e["sd"] = cell.sd;
      e["avg_se"] = cell.avg_se;
      e["coverage"] = cell.coverage;
      jcells.push_back(std::move(e));
    }
    jc["cells"] = std::move(jcells);
    results.push_back(std::move(jc));
  }
  j["results"] = std::move(results);
  return j.dump(2) + "\n";
}

std::string SimulationReport::to_text() const {
  std::ostringstream os;
  char buf[256];
  const int T = static_cast<int>(timepoint_labels.size());
  const int nz = static_cast<int>(treatment_labels.size()) - 1;
  for (int z = 1; z <= nz; ++z) {
    for (int t = 0; t < T; ++t) {
      os << "treatment " << treatment_labels[z] << " vs " << treatment_labels[0]
         << " at " << timepoint_labels[t] << " h (truth " << cell(0, z, t).truth << ")\n";
      std::snprintf(buf, sizeof(buf), "  %-22s %-13s %8s %8s %8s %9s\n", "Mean structure", "Covariance", "Bias", "SD", "Avg. SE", "Coverage");
      os << buf;
      for (size_t c = 0; c < configs.size(); ++c) {
        const auto& cl = cells[c][static_cast<size_t>(z - 1) * T + t];
        std::snprintf(buf, sizeof(buf), "  %-22s %-13s %8.2f %8.2f %8.2f %9.3f\n",
                      configs[c].nonparametric ? "mu1" : xover::to_string(configs[c].mean),
                      configs[c].nonparametric ? "" : xover::to_string(configs[c].cov),
                      cl.bias, cl.sd, cl.avg_se, cl.coverage);
        os << buf;
      }
      os << "\n";
    }
  }
  return os.str();
}

namespace {

struct CellSample {
  double estimate = 0.0;
  double se = 0.0;
  bool covered = false;
};

struct ReplicateOutcome {
  bool failed = false;
  double theorem_gap = 0.0;
  std::vector<std::vector<CellSample>> samples;  // per config, per (z-1)*T+t
};

}  // namespace

SimulationReport run_study(const GeneratorModel& g, const SimulationConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  g.validate();
  cfg.validate();
  const int P = g.P(), T = g.T();
  const int n_cells = (P - 1) * T;
  const int R = cfg.replicates;
  const double tq = t_quantile(0.5 + cfg.ci_level / 2.0, g.n - 1);

  std::vector<ReplicateOutcome> outcomes(R);
  std::atomic<int> next{0};

  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= R) return;
      ReplicateOutcome& out = outcomes[r];
      try {
        const TrialDataset ds = simulate_trial(g, derive_seed(cfg.seed, static_cast<std::uint64_t>(r)));
        out.samples.resize(cfg.configs.size());
        for (size_t c = 0; c < cfg.configs.size(); ++c) {
          auto& dest = out.samples[c];
          dest.resize(n_cells);
          if (cfg.configs[c].nonparametric) {
            for (int z = 1; z < P; ++z) {
              const auto est = mu1(ds, z, cfg.ci_level);
              for (int t = 0; t < T; ++t) {
                dest[static_cast<size_t>(z - 1) * T + t] = {est[t].estimate, est[t].se, false};
              }
            }
          } else {
            const FittedWorkingModel m = fit_wls(ds, cfg.configs[c].mean, cfg.configs[c].cov);
            for (int z = 1; z < P; ++z) {
              const auto est2 = mu2(m, ds, z, cfg.ci_level);
              const auto est3 = mu3(m, ds, z, cfg.ci_level);
              for (int t = 0; t < T; ++t) {
                dest[static_cast<size_t>(z - 1) * T + t] = {est2[t].estimate, est2[t].se, false};
                const double gap = std::abs(est2[t].estimate - est3[t].estimate) / (1.0 + std::abs(est2[t].estimate));
                out.theorem_gap = std::max(out.theorem_gap, gap);
              }
            }
          }
          for (int z = 1; z < P; ++z) {
            for (int t = 0; t < T; ++t) {
              auto& cell = dest[static_cast<size_t>(z - 1) * T + t];
              const double truth = g.truth(z - 1, t);
              cell.covered = std::abs(cell.estimate - truth) <= tq * cell.se;
            }
          }
        }
      } catch (const std::exception&) {
        out.failed = true;
        out.samples.clear();
      }
    }
  };

  if (cfg.workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(cfg.workers);
    for (int w = 0; w < cfg.workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  SimulationReport report;
  report.replicates = R;
  report.seed = cfg.seed;
  report.configs = cfg.configs;
  report.treatment_labels = g.treatment_labels;
  report.timepoint_labels = g.timepoint_labels;

  int ok = 0;
  for (const auto& out : outcomes) {
    if (!out.failed) {
      ++ok;
      report.max_theorem1_gap = std::max(report.max_theorem1_gap, out.theorem_gap);
    }
  }
  report.failed_replicates = R - ok;
  if (report.failed_replicates > 0) {
    std::cerr << "xover: " << report.failed_replicates << " of " << R << " replicates failed and were excluded\n";
  }
  if (report.failed_replicates * 100 > R) {
    throw Error("more than 1% of replicates failed (" + std::to_string(report.failed_replicates) + " of " + std::to_string(R) + ")");
  }

  report.cells.assign(cfg.configs.size(), std::vector<SimulationCell>(n_cells));
  for (size_t c = 0; c < cfg.configs.size(); ++c) {
    for (int z = 1; z < P; ++z) {
      for (int t = 0; t < T; ++t) {
        const size_t idx = static_cast<size_t>(z - 1) * T + t;
        Eigen::VectorXd est(ok);
        double se_sum = 0.0;
        int covered = 0, pos = 0;
        for (const auto& out : outcomes) {
          if (out.failed) continue;
          const auto& s = out.samples[c][idx];
          est[pos++] = s.estimate;
          se_sum += s.se;
          covered += s.covered ? 1 : 0;
        }
        SimulationCell& cell = report.cells[c][idx];
        cell.treatment = z;
        cell.time = t;
        cell.truth = g.truth(z - 1, t);
        cell.bias = est.mean() - cell.truth;
        cell.sd = sample_sd(est);
        cell.avg_se = se_sum / ok;
        cell.coverage = static_cast<double>(covered) / ok;
      }
    }
  }

  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace xover
