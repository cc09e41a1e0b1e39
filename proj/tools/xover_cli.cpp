// Command-line front end: analyze, verify, fit-generator, simulate.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "xover/causal_estimators.hpp"
#include "xover/errors.hpp"
#include "xover/hypothesis_tests.hpp"
#include "xover/report.hpp"
#include "xover/sim_engine.hpp"
#include "xover/trial_data.hpp"
#include "xover/version.hpp"
#include "xover/working_model.hpp"

namespace {

using namespace xover;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open file for writing: " + path);
  out << contents;
  if (!out) throw ValidationError("failed writing " + path);
}

std::string default_stem(const std::string& data_path) {
  std::filesystem::path p(data_path);
  p.replace_extension();
  return p.string();
}

std::uint64_t resolve_seed(bool seed_given, std::uint64_t seed) {
  if (seed_given) return seed;
  std::random_device rd;
  const std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  std::cout << "no --seed given; using seed " << s << "\n";
  return s;
}

int resolve_workers(bool workers_given, int workers) {
  if (workers_given) return workers;
  if (const char* env = std::getenv("XOVER_WORKERS")) {
    const int w = std::atoi(env);
    if (w >= 1) return w;
  }
  return 1;
}

struct AnalyzeOptions {
  std::string data;
  std::string placebo;
  bool all = false;
  std::string mean, cov;
  std::vector<std::string> treatments;
  std::string out;
  double level = 0.95;
  TestConfig test;
  bool seed_given = false;
  bool no_tests = false;
};

ConfigAnalysis analyze_one(const TrialDataset& ds, const EstimatorConfig& config, const std::vector<int>& zs,
                           double level, const TestConfig& tc, bool run_tests) {
  ConfigAnalysis c;
  c.config = config;
  std::optional<FittedWorkingModel> model;
  if (!config.nonparametric) model.emplace(fit_wls(ds, config.mean, config.cov));
  for (int z : zs) {
    std::vector<EffectEstimate> est;
    if (config.nonparametric) {
      est = mu1(ds, z, level);
    } else {
      est = mu2(*model, ds, z, level);
      const auto est3 = mu3(*model, ds, z, level);
      for (int t = 0; t < ds.T; ++t) {
        const double gap = std::abs(est[t].estimate - est3[t].estimate) / (1.0 + std::abs(est[t].estimate));
        c.theorem_gap = std::max(c.theorem_gap, gap);
      }
    }
    if (run_tests) {
      const JointEffect je = joint_effect(est);
      c.test_treatments.push_back(ds.treatment_labels[z]);
      c.iu_tests.push_back(iu_test(je, tc, ds.T));
      c.positive_control_tests.push_back(positive_control_test(je, tc, ds.T));
    }
    c.estimates.insert(c.estimates.end(), est.begin(), est.end());
  }
  return c;
}

int cmd_analyze(const AnalyzeOptions& opt, const std::string& echo) {
  const auto ingest = ingest_csv(opt.data, opt.placebo);
  const TrialDataset& ds = ingest.dataset;

  std::vector<EstimatorConfig> configs;
  if (opt.all || (opt.mean.empty() && opt.cov.empty())) {
    configs = all_estimator_configs();
  } else {
    if (opt.mean.empty() || opt.cov.empty()) throw CLI::ValidationError("--mean and --cov must be given together");
    configs.push_back({false, mean_structure_from_string(opt.mean), covariance_structure_from_string(opt.cov)});
  }

  std::vector<int> zs;
  if (opt.treatments.empty()) {
    for (int z = 1; z < ds.P; ++z) zs.push_back(z);
  } else {
    for (const auto& label : opt.treatments) {
      const int z = ds.treatment_code(label);
      if (z == 0) throw ValidationError("cannot analyse placebo against itself");
      zs.push_back(z);
    }
  }

  AnalysisReport report;
  report.n = ds.n;
  report.P = ds.P;
  report.T = ds.T;
  report.timepoint_labels = ds.timepoint_labels;
  report.treatment_labels = ds.treatment_labels;
  report.ci_level = opt.level;
  report.version = kVersion;
  report.config_echo = echo;
  for (const auto& config : configs) {
    report.results.push_back(analyze_one(ds, config, zs, opt.level, opt.test, !opt.no_tests));
  }

  const std::string stem = opt.out.empty() ? default_stem(opt.data) : opt.out;
  write_file(stem + ".report.json", render_table(report, ReportStyle::JSON));
  write_file(stem + ".report.csv", render_table(report, ReportStyle::CSV));
  const std::string txt = render_table(report, ReportStyle::PAPER_TABLE);
  write_file(stem + ".report.txt", txt);
  std::cout << txt;
  std::cout << "wrote " << stem << ".report.{json,csv,txt}\n";
  return 0;
}

struct VerifyOptions {
  std::string data;
  std::string placebo;
  std::string generator;
  int n_override = 0;
  std::uint64_t seed = 1;
  double corrupt_weight = 0.0;
};

int cmd_verify(const VerifyOptions& opt) {
  TrialDataset ds;
  if (!opt.data.empty()) {
    ds = ingest_csv(opt.data, opt.placebo).dataset;
  } else {
    GeneratorModel g = GeneratorModel::from_json(read_file(opt.generator));
    if (opt.n_override > 0) g.n = opt.n_override;
    ds = simulate_trial(g, opt.seed);
  }

  constexpr double kTol = 1e-8;
  bool all_ok = true;
  std::printf("%-22s %-13s %12s %12s %12s  %s\n", "mean", "cov", "max|mu2-mu3|", "identity(8)", "identity(9)", "status");
  for (const auto& config : all_estimator_configs()) {
    if (config.nonparametric) continue;
    FittedWorkingModel m = fit_wls(ds, config.mean, config.cov);
    if (opt.corrupt_weight != 0.0) {
      // Negative control: perturb one diagonal block of the expanded weight
      // so it is no longer block-exchangeable, then refit.
      Eigen::MatrixXd W = m.V->expand();
      W.topLeftCorner(ds.T, ds.T) += opt.corrupt_weight * W.topLeftCorner(ds.T, ds.T);
      m = fit_gls_fixed_weight(ds, config.mean, W);
    }

    double gap = 0.0;
    for (int z = 1; z < ds.P; ++z) {
      const auto e2 = mu2(m, ds, z, 0.95, false);
      const auto e3 = mu3(m, ds, z);
      for (int t = 0; t < ds.T; ++t) {
        gap = std::max(gap, std::abs(e2[t].estimate - e3[t].estimate) / (1.0 + std::abs(e2[t].estimate)));
      }
    }
    const double id8 = m.identity_time_norm();
    double id9 = 0.0;
    for (int z = 0; z < ds.P; ++z) id9 = std::max(id9, m.identity_treatment_norm(z));
    const bool ok = gap <= kTol && id8 <= kTol && id9 <= kTol;
    all_ok = all_ok && ok;
    std::printf("%-22s %-13s %12.3e %12.3e %12.3e  %s\n", to_string(config.mean), to_string(config.cov), gap, id8, id9, ok ? "ok" : "FAIL");
  }
  if (!all_ok) {
    std::cerr << "verification failed\n";
    return 1;
  }
  std::cout << "all configurations verified\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"causal analysis of cross-over (TQT) trials"};
  app.set_version_flag("--version", xover::kVersion);
  app.require_subcommand(1);
  std::ostringstream echo;
  for (int i = 1; i < argc; ++i) echo << (i > 1 ? " " : "") << argv[i];

  AnalyzeOptions an;
  auto* analyze = app.add_subcommand("analyze", "estimate treatment effects under a range of working models");
  analyze->add_option("--data", an.data, "long-format CSV")->required();
  analyze->add_option("--placebo", an.placebo, "placebo treatment label")->required();
  analyze->add_flag("--all", an.all, "run all twelve model configurations plus the non-parametric estimator (default)");
  analyze->add_option("--mean", an.mean, "mean structure: abm|period-baseline|simple|baseline-by-treatment");
  analyze->add_option("--cov", an.cov, "covariance structure: unstructured|ar1|independence");
  analyze->add_option("--treatment", an.treatments, "restrict to treatment label(s)");
  analyze->add_option("--level", an.level, "confidence level")->check(CLI::Range(0.5, 0.9999));
  analyze->add_option("--delta", an.test.delta, "prolongation margin in ms");
  analyze->add_option("--alpha", an.test.alpha, "test level");
  analyze->add_option("--mc-draws", an.test.mc_draws, "Monte Carlo draws for the max-t quantile");
  auto* an_seed = analyze->add_option("--seed", an.test.seed, "seed for the max-t quantile");
  analyze->add_flag("--no-tests", an.no_tests, "skip the prolongation tests");
  analyze->add_option("--out", an.out, "output stem (default: data path without extension)");

  VerifyOptions ve;
  auto* verify = app.add_subcommand("verify", "check the mu2 = mu3 equality and the residual identities");
  verify->add_option("--data", ve.data, "long-format CSV");
  verify->add_option("--placebo", ve.placebo, "placebo treatment label");
  verify->add_option("--generator", ve.generator, "generator JSON (used when no --data)");
  verify->add_option("--n", ve.n_override, "override subject count for generator verification");
  verify->add_option("--seed", ve.seed, "seed for generator verification");
  verify->add_option("--corrupt-weight", ve.corrupt_weight, "")->group("");  // negative-control knob

  std::string fg_data, fg_placebo, fg_out, fg_rule = "uniform-permutation";
  int fg_n = 0;
  auto* fitgen = app.add_subcommand("fit-generator", "fit the simulation generator to a dataset");
  fitgen->add_option("--data", fg_data, "long-format CSV")->required();
  fitgen->add_option("--placebo", fg_placebo, "placebo treatment label")->required();
  fitgen->add_option("--out", fg_out, "output JSON path")->required();
  fitgen->add_option("--n", fg_n, "subjects per replicate (default: dataset size)");
  fitgen->add_option("--sequence-rule", fg_rule, "uniform-permutation|williams-square");

  std::string si_generator, si_out;
  int si_reps = 10000, si_workers = 1;
  std::uint64_t si_seed = 1;
  double si_level = 0.95;
  auto* simulate = app.add_subcommand("simulate", "run the Monte Carlo study for a fitted generator");
  simulate->add_option("--generator", si_generator, "generator JSON")->required();
  simulate->add_option("--reps", si_reps, "replicate count");
  auto* si_seed_opt = simulate->add_option("--seed", si_seed, "master seed");
  auto* si_workers_opt = simulate->add_option("--workers", si_workers, "worker threads (or XOVER_WORKERS)");
  simulate->add_option("--level", si_level, "CI level")->check(CLI::Range(0.5, 0.9999));
  simulate->add_option("--out", si_out, "output stem (default: generator path without extension)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (analyze->parsed()) {
      an.test.seed = resolve_seed(an_seed->count() > 0, an.test.seed);
      return cmd_analyze(an, echo.str());
    }
    if (verify->parsed()) {
      if (ve.data.empty() == ve.generator.empty()) {
        std::cerr << "verify needs exactly one of --data or --generator\n";
        return 2;
      }
      if (!ve.data.empty() && ve.placebo.empty()) {
        std::cerr << "--placebo is required with --data\n";
        return 2;
      }
      return cmd_verify(ve);
    }
    if (fitgen->parsed()) {
      const auto ingest = xover::ingest_csv(fg_data, fg_placebo);
      xover::GeneratorModel g = xover::fit_generator(ingest.dataset);
      if (fg_n > 0) g.n = fg_n;
      g.sequence_rule = xover::sequence_rule_from_string(fg_rule);
      write_file(fg_out, g.to_json());
      std::cout << "wrote generator to " << fg_out << " (n=" << g.n << ")\n";
      return 0;
    }
    if (simulate->parsed()) {
      if (si_reps < 1) throw CLI::ValidationError("--reps must be positive");
      xover::SimulationConfig cfg;
      cfg.replicates = si_reps;
      cfg.seed = resolve_seed(si_seed_opt->count() > 0, si_seed);
      cfg.workers = resolve_workers(si_workers_opt->count() > 0, si_workers);
      cfg.ci_level = si_level;
      const xover::GeneratorModel g = xover::GeneratorModel::from_json(read_file(si_generator));
      const xover::SimulationReport report = xover::run_study(g, cfg);
      const std::string stem = si_out.empty() ? default_stem(si_generator) : si_out;
      write_file(stem + ".report.json", report.to_json());
      write_file(stem + ".report.txt", report.to_text());
      std::cout << "wrote " << stem << ".report.{json,txt} (" << report.replicates << " replicates, "
                << report.failed_replicates << " failed, " << report.wall_seconds << " s)\n";
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const xover::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
