#ifndef XOVER_REPORT_HPP
#define XOVER_REPORT_HPP

#include <string>
#include <vector>

#include "xover/causal_estimators.hpp"
#include "xover/hypothesis_tests.hpp"

namespace xover {

enum class ReportStyle { PAPER_TABLE, CSV, JSON };

// One analysed configuration: estimates for every (treatment, timepoint),
// the mu2-vs-mu3 agreement gap, and the prolongation tests per treatment.
struct ConfigAnalysis {
  EstimatorConfig config;
  std::vector<EffectEstimate> estimates;  // treatment-major, then time
  double theorem_gap = 0.0;               // 0 for mu1
  std::vector<std::string> test_treatments;       // labels, aligned with tests
  std::vector<TestResult> iu_tests;
  std::vector<TestResult> positive_control_tests;
};

struct AnalysisReport {
  int n = 0, P = 0, T = 0;
  std::vector<double> timepoint_labels;
  std::vector<std::string> treatment_labels;
  double ci_level = 0.95;
  std::string version;
  std::string config_echo;  // the command-line options that produced this
  std::vector<ConfigAnalysis> results;

  // Validates completeness (non-empty configuration list, a full
  // (treatment x time) grid per configuration, ordered CI bounds).
  void validate() const;
};

// Pure renderers: same report, same bytes.
//   PAPER_TABLE  fixed two-decimal text, one block of configuration rows per
//                (treatment, timepoint), non-parametric row last
//   CSV          '#' metadata lines plus one full-precision row per estimate
//   JSON         full document
std::string render_table(const AnalysisReport& report, ReportStyle style);

AnalysisReport analysis_report_from_json(const std::string& text);
AnalysisReport analysis_report_from_csv(const std::string& text);

}  // namespace xover

#endif
