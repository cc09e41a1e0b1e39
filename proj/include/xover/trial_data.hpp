#ifndef XOVER_TRIAL_DATA_HPP
#define XOVER_TRIAL_DATA_HPP

#include <Eigen/Core>
#include <string>
#include <vector>

namespace xover {

// Complete-case cross-over trial data. Every subject has exactly P periods,
// one treatment per period forming a permutation of 0..P-1 (0 = placebo),
// one baseline per period and T outcomes per period.
struct TrialDataset {
  int n = 0;  // subjects
  int P = 0;  // periods (= number of treatments)
  int T = 0;  // post-baseline timepoints per period

  std::vector<double> timepoint_labels;        // strictly increasing, hours
  std::vector<std::string> treatment_labels;   // index 0 is placebo
  std::vector<std::string> subject_ids;

  Eigen::MatrixXd X;  // n x P baseline QTc (ms)
  Eigen::MatrixXi Z;  // n x P treatment codes in 0..P-1
  Eigen::MatrixXd Y;  // n x (P*T) outcomes, column index p*T + t

  double y(int subject, int period, int time) const { return Y(subject, period * T + time); }

  // Outcomes of one subject stacked period-major, as used by the fitters.
  Eigen::VectorXd subject_outcomes(int subject) const { return Y.row(subject).transpose(); }

  int treatment_code(const std::string& label) const;
  int timepoint_index(double label) const;

  // Checks the rectangle, permutation and finiteness invariants; throws
  // ValidationError on the first violation.
  void validate() const;
};

// Read-only view of a single subject.
struct SubjectRecord {
  const TrialDataset* ds = nullptr;
  int subject = -1;

  const std::string& id() const { return ds->subject_ids[subject]; }
  double baseline(int period) const { return ds->X(subject, period); }
  int treatment(int period) const { return ds->Z(subject, period); }
  double outcome(int period, int time) const { return ds->y(subject, period, time); }
};

inline SubjectRecord subject_record(const TrialDataset& ds, int subject) { return {&ds, subject}; }

// Column-name map for the long CSV format.
struct CsvSchema {
  std::string subject = "subject";
  std::string period = "period";
  std::string treatment = "treatment";
  std::string baseline = "baseline";
  std::string time = "time";
  std::string qtc = "qtc";
};

struct IngestResult {
  TrialDataset dataset;
  std::vector<std::string> dropped_subjects;  // ids excluded for missing cells
};

// Parses a long-format CSV (one row per subject/period/timepoint; header
// required) into a validated TrialDataset. Subjects with any missing cell
// are dropped; one line per dropped subject is written to stderr. The
// placebo treatment label must be named explicitly.
IngestResult ingest_csv(const std::string& path, const CsvSchema& schema, const std::string& placebo_label);

inline IngestResult ingest_csv(const std::string& path, const std::string& placebo_label) {
  return ingest_csv(path, CsvSchema{}, placebo_label);
}

// Writes the canonical long CSV; ingest(write(ds)) reproduces ds exactly
// (values are printed with round-trip precision).
void write_csv(const TrialDataset& ds, const std::string& path);

// Mean of the P baselines of one subject.
double average_baseline(const TrialDataset& ds, int subject);

}  // namespace xover

#endif
