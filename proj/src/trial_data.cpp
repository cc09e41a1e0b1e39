#include "xover/trial_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "xover/errors.hpp"

namespace xover {

int TrialDataset::treatment_code(const std::string& label) const {
  for (size_t i = 0; i < treatment_labels.size(); ++i) {
    if (treatment_labels[i] == label) return static_cast<int>(i);
  }
  throw ValidationError("unknown treatment label: " + label);
}

int TrialDataset::timepoint_index(double label) const {
  for (size_t i = 0; i < timepoint_labels.size(); ++i) {
    if (timepoint_labels[i] == label) return static_cast<int>(i);
  }
  throw ValidationError("unknown timepoint label: " + std::to_string(label));
}

void TrialDataset::validate() const {
  if (n < 1 || P < 1 || T < 1) throw ValidationError("empty dataset");
  if (static_cast<int>(timepoint_labels.size()) != T) throw ValidationError("timepoint label count mismatch");
  if (static_cast<int>(treatment_labels.size()) != P) throw ValidationError("treatment label count mismatch");
  for (int t = 1; t < T; ++t) {
    if (!(timepoint_labels[t] > timepoint_labels[t - 1])) {
      throw ValidationError("timepoint labels must be strictly increasing");
    }
  }
  if (X.rows() != n || X.cols() != P || Z.rows() != n || Z.cols() != P || Y.rows() != n || Y.cols() != static_cast<Eigen::Index>(P) * T) {
    throw ValidationError("dataset matrix dimensions inconsistent with n/P/T");
  }
  if (!X.allFinite() || !Y.allFinite()) throw ValidationError("non-finite QTc value");
  for (int i = 0; i < n; ++i) {
    std::vector<bool> seen(P, false);
    for (int p = 0; p < P; ++p) {
      const int z = Z(i, p);
      if (z < 0 || z >= P || seen[z]) {
        throw ValidationError("treatments of subject " + subject_ids[i] + " are not a permutation of 0.." + std::to_string(P - 1));
      }
      seen[z] = true;
    }
  }
}

double average_baseline(const TrialDataset& ds, int subject) {
  if (subject < 0 || subject >= ds.n) throw ValidationError("subject index out of range");
  return ds.X.row(subject).mean();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  for (auto& f : fields) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.erase(f.begin());
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.pop_back();
  }
  return fields;
}

double parse_double(const std::string& s, long line, const char* what) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e || !std::isfinite(v)) {
    throw ParseError(std::string("bad ") + what + " value '" + s + "'", line);
  }
  return v;
}

long parse_int(const std::string& s, long line, const char* what) {
  long v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) {
    throw ParseError(std::string("bad ") + what + " value '" + s + "'", line);
  }
  return v;
}

struct RawRow {
  std::string subject;
  int period;  // 1-based in file
  std::string treatment;
  double baseline;
  double time;
  double qtc;
  long line;
};

std::string format_full(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

IngestResult ingest_csv(const std::string& path, const CsvSchema& schema, const std::string& placebo_label) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open file: " + path);

  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty file", 1);
  ++lineno;
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    throw ParseError("missing required column '" + name + "' in header", 1);
  };
  const int c_subject = col(schema.subject);
  const int c_period = col(schema.period);
  const int c_treatment = col(schema.treatment);
  const int c_baseline = col(schema.baseline);
  const int c_time = col(schema.time);
  const int c_qtc = col(schema.qtc);

  std::vector<RawRow> rows;
  std::vector<std::string> subject_order;  // first-appearance order
  std::set<std::string> subject_seen;
  int max_period = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (static_cast<int>(f.size()) != static_cast<int>(header.size())) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()), lineno);
    }
    RawRow r;
    r.subject = f[c_subject];
    if (r.subject.empty()) throw ParseError("empty subject id", lineno);
    r.period = static_cast<int>(parse_int(f[c_period], lineno, "period"));
    if (r.period < 1) throw ParseError("period must be a 1-based positive integer", lineno);
    r.treatment = f[c_treatment];
    r.baseline = parse_double(f[c_baseline], lineno, "baseline");
    r.time = parse_double(f[c_time], lineno, "time");
    r.qtc = parse_double(f[c_qtc], lineno, "qtc");
    r.line = lineno;
    max_period = std::max(max_period, r.period);
    if (subject_seen.insert(r.subject).second) subject_order.push_back(r.subject);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ValidationError("no data rows in " + path);

  const int P = max_period;

  // Aggregate per-period timepoint sets across the whole file; the design
  // requires one common grid for all periods.
  std::vector<std::set<double>> period_times(P);
  for (const auto& r : rows) period_times[r.period - 1].insert(r.time);
  for (int p = 1; p < P; ++p) {
    if (!period_times[p].empty() && period_times[p] != period_times[0]) {
      throw ValidationError("inconsistent timepoint sets across periods (period 1 vs period " + std::to_string(p + 1) + ")");
    }
  }
  std::vector<double> times(period_times[0].begin(), period_times[0].end());
  const int T = static_cast<int>(times.size());
  auto time_index = [&](double t) {
    const auto it = std::lower_bound(times.begin(), times.end(), t);
    return static_cast<int>(it - times.begin());
  };

  // Per-subject cell table; duplicate cells are a structural error.
  struct Cell {
    bool present = false;
    double qtc = 0.0;
  };
  struct SubjectAgg {
    std::vector<Cell> cells;               // P*T
    std::vector<double> baseline;          // per period (NaN if unseen)
    std::vector<std::string> treatment;    // per period
    std::vector<bool> period_seen;
  };
  std::map<std::string, SubjectAgg> agg;
  for (const auto& r : rows) {
    auto& a = agg[r.subject];
    if (a.cells.empty()) {
      a.cells.resize(static_cast<size_t>(P) * T);
      a.baseline.assign(P, std::numeric_limits<double>::quiet_NaN());
      a.treatment.assign(P, "");
      a.period_seen.assign(P, false);
    }
    const int p = r.period - 1;
    const int t = time_index(r.time);
    auto& cell = a.cells[static_cast<size_t>(p) * T + t];
    if (cell.present) {
      throw ParseError("duplicate row for subject " + r.subject + ", period " + std::to_string(r.period) + ", time " + format_full(r.time), r.line);
    }
    cell.present = true;
    cell.qtc = r.qtc;
    if (a.period_seen[p]) {
      if (a.baseline[p] != r.baseline) {
        throw ParseError("subject " + r.subject + " has conflicting baselines in period " + std::to_string(r.period), r.line);
      }
      if (a.treatment[p] != r.treatment) {
        throw ParseError("subject " + r.subject + " has conflicting treatments in period " + std::to_string(r.period), r.line);
      }
    } else {
      a.period_seen[p] = true;
      a.baseline[p] = r.baseline;
      a.treatment[p] = r.treatment;
    }
  }

  // Complete-case filter.
  std::vector<std::string> kept, dropped;
  for (const auto& id : subject_order) {
    const auto& a = agg.at(id);
    bool complete = true;
    for (int p = 0; p < P && complete; ++p) complete = a.period_seen[p];
    for (const auto& c : a.cells) {
      if (!c.present) {
        complete = false;
        break;
      }
    }
    if (complete) {
      kept.push_back(id);
    } else {
      dropped.push_back(id);
      std::cerr << "xover: dropping incomplete subject " << id << "\n";
    }
  }
  if (kept.empty()) throw ValidationError("no complete subjects after exclusion");

  // Treatment label table: placebo first, remaining labels sorted.
  std::set<std::string> label_set;
  for (const auto& id : kept) {
    for (const auto& tr : agg.at(id).treatment) label_set.insert(tr);
  }
  if (!label_set.count(placebo_label)) {
    throw ValidationError("placebo label '" + placebo_label + "' does not occur in the data");
  }
  if (static_cast<int>(label_set.size()) != P) {
    throw ValidationError("found " + std::to_string(label_set.size()) + " treatment labels for " + std::to_string(P) + " periods");
  }
  std::vector<std::string> labels;
  labels.push_back(placebo_label);
  for (const auto& l : label_set) {
    if (l != placebo_label) labels.push_back(l);
  }
  std::map<std::string, int> code;
  for (size_t i = 0; i < labels.size(); ++i) code[labels[i]] = static_cast<int>(i);

  TrialDataset ds;
  ds.n = static_cast<int>(kept.size());
  ds.P = P;
  ds.T = T;
  ds.timepoint_labels = times;
  ds.treatment_labels = labels;
  ds.subject_ids = kept;
  ds.X.resize(ds.n, P);
  ds.Z.resize(ds.n, P);
  ds.Y.resize(ds.n, static_cast<Eigen::Index>(P) * T);
  for (int i = 0; i < ds.n; ++i) {
    const auto& a = agg.at(kept[i]);
    std::vector<bool> seen(P, false);
    for (int p = 0; p < P; ++p) {
      ds.X(i, p) = a.baseline[p];
      const int z = code.at(a.treatment[p]);
      if (seen[z]) {
        throw ValidationError("treatments of subject " + kept[i] + " are not a permutation (repeated '" + a.treatment[p] + "')");
      }
      seen[z] = true;
      ds.Z(i, p) = z;
      for (int t = 0; t < T; ++t) ds.Y(i, static_cast<Eigen::Index>(p) * T + t) = a.cells[static_cast<size_t>(p) * T + t].qtc;
    }
  }
  ds.validate();
  return {std::move(ds), std::move(dropped)};
}

void write_csv(const TrialDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open file for writing: " + path);
  out << "subject,period,treatment,baseline,time,qtc\n";
  for (int i = 0; i < ds.n; ++i) {
    for (int p = 0; p < ds.P; ++p) {
      for (int t = 0; t < ds.T; ++t) {
        out << ds.subject_ids[i] << ',' << (p + 1) << ',' << ds.treatment_labels[ds.Z(i, p)] << ','
            << format_full(ds.X(i, p)) << ',' << format_full(ds.timepoint_labels[t]) << ','
            << format_full(ds.y(i, p, t)) << '\n';
      }
    }
  }
  if (!out) throw ValidationError("failed writing " + path);
}

}  // namespace xover
