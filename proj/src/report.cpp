#include "xover/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "xover/errors.hpp"

namespace xover {

using nlohmann::json;

namespace {

std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json test_to_json(const TestResult& t) {
  json j;
  j["kind"] = t.kind == TestKind::IU ? "iu" : "positive-control";
  j["delta"] = t.delta;
  j["alpha"] = t.alpha;
  j["critical_value"] = t.critical_value;
  j["reject"] = t.reject;
  j["statistics"] = t.statistics;
  j["per_timepoint"] = t.per_timepoint;
  return j;
}

TestResult test_from_json(const json& j) {
  TestResult t;
  t.kind = j.at("kind").get<std::string>() == "iu" ? TestKind::IU : TestKind::POSITIVE_CONTROL;
  t.delta = j.at("delta").get<double>();
  t.alpha = j.at("alpha").get<double>();
  t.critical_value = j.at("critical_value").get<double>();
  t.reject = j.at("reject").get<bool>();
  t.statistics = j.at("statistics").get<std::vector<double>>();
  t.per_timepoint = j.at("per_timepoint").get<std::vector<bool>>();
  return t;
}

json config_header_json(const ConfigAnalysis& c) {
  json j;
  j["estimator"] = c.config.nonparametric ? "mu1" : "mu2";
  if (!c.config.nonparametric) {
    j["mean"] = std::string(to_string(c.config.mean));
    j["cov"] = std::string(to_string(c.config.cov));
  }
  j["theorem_gap"] = c.theorem_gap;
  j["test_treatments"] = c.test_treatments;
  json iu = json::array(), pc = json::array();
  for (const auto& t : c.iu_tests) iu.push_back(test_to_json(t));
  for (const auto& t : c.positive_control_tests) pc.push_back(test_to_json(t));
  j["iu_tests"] = std::move(iu);
  j["positive_control_tests"] = std::move(pc);
  return j;
}

void config_header_from_json(const json& j, ConfigAnalysis& c) {
  c.config.nonparametric = j.at("estimator").get<std::string>() == "mu1";
  if (!c.config.nonparametric) {
    c.config.mean = mean_structure_from_string(j.at("mean").get<std::string>());
    c.config.cov = covariance_structure_from_string(j.at("cov").get<std::string>());
  }
  c.theorem_gap = j.at("theorem_gap").get<double>();
  c.test_treatments = j.at("test_treatments").get<std::vector<std::string>>();
  for (const auto& t : j.at("iu_tests")) c.iu_tests.push_back(test_from_json(t));
  for (const auto& t : j.at("positive_control_tests")) c.positive_control_tests.push_back(test_from_json(t));
}

json report_to_json_value(const AnalysisReport& r) {
  json j;
  j["version"] = r.version;
  j["ci_level"] = r.ci_level;
  j["config_echo"] = r.config_echo;
  json ds;
  ds["n"] = r.n;
  ds["P"] = r.P;
  ds["T"] = r.T;
  ds["timepoints"] = r.timepoint_labels;
  ds["treatments"] = r.treatment_labels;
  j["dataset"] = std::move(ds);
  json results = json::array();
  for (const auto& c : r.results) {
    json jc = config_header_json(c);
    json est = json::array();
    for (const auto& e : c.estimates) {
      json je;
      je["treatment"] = e.treatment_label;
      je["time"] = e.time_label;
      je["estimate"] = e.estimate;
      je["se"] = e.se;
      je["ci_lower"] = e.ci_lower;
      je["ci_upper"] = e.ci_upper;
      je["df"] = e.df;
      est.push_back(std::move(je));
    }
    jc["estimates"] = std::move(est);
    results.push_back(std::move(jc));
  }
  j["results"] = std::move(results);
  return j;
}

AnalysisReport report_from_json_value(const json& j) {
  AnalysisReport r;
  r.version = j.at("version").get<std::string>();
  r.ci_level = j.at("ci_level").get<double>();
  r.config_echo = j.at("config_echo").get<std::string>();
  const json& ds = j.at("dataset");
  r.n = ds.at("n").get<int>();
  r.P = ds.at("P").get<int>();
  r.T = ds.at("T").get<int>();
  r.timepoint_labels = ds.at("timepoints").get<std::vector<double>>();
  r.treatment_labels = ds.at("treatments").get<std::vector<std::string>>();
  for (const json& jc : j.at("results")) {
    ConfigAnalysis c;
    config_header_from_json(jc, c);
    for (const json& je : jc.at("estimates")) {
      EffectEstimate e;
      e.kind = c.config.nonparametric ? EstimatorKind::MU1 : EstimatorKind::MU2;
      e.treatment_label = je.at("treatment").get<std::string>();
      e.time_label = je.at("time").get<double>();
      e.estimate = je.at("estimate").get<double>();
      e.se = je.at("se").get<double>();
      e.ci_lower = je.at("ci_lower").get<double>();
      e.ci_upper = je.at("ci_upper").get<double>();
      e.df = je.at("df").get<int>();
      e.level = r.ci_level;
      for (size_t z = 0; z < r.treatment_labels.size(); ++z) {
        if (r.treatment_labels[z] == e.treatment_label) e.treatment = static_cast<int>(z);
      }
      for (size_t t = 0; t < r.timepoint_labels.size(); ++t) {
        if (r.timepoint_labels[t] == e.time_label) e.time = static_cast<int>(t);
      }
      c.estimates.push_back(std::move(e));
    }
    r.results.push_back(std::move(c));
  }
  r.validate();
  return r;
}

std::string render_paper_table(const AnalysisReport& r) {
  std::ostringstream os;
  char buf[256];
  os << "cross-over analysis (n=" << r.n << ", P=" << r.P << ", T=" << r.T << ")\n";
  os << "treatments:";
  for (const auto& l : r.treatment_labels) os << ' ' << l;
  os << " (placebo " << r.treatment_labels[0] << ")\n\n";

  const int ci_pct = static_cast<int>(std::lround(r.ci_level * 100));
  std::vector<int> treatments;
  for (const auto& e : r.results.front().estimates) {
    if (std::find(treatments.begin(), treatments.end(), e.treatment) == treatments.end()) treatments.push_back(e.treatment);
  }
  for (int z : treatments) {
    for (int t = 0; t < r.T; ++t) {
      os << "treatment " << r.treatment_labels[z] << " vs " << r.treatment_labels[0]
         << " at " << r.timepoint_labels[t] << " h\n";
      std::snprintf(buf, sizeof(buf), "  %-22s %-13s %9s %7s   %d%% CI\n", "Mean structure", "Covariance", "Estimate", "SE", ci_pct);
      os << buf;
      for (const auto& c : r.results) {
        const EffectEstimate* e = nullptr;
        for (const auto& cand : c.estimates) {
          if (cand.treatment == z && cand.time == t) e = &cand;
        }
        if (!e) continue;
        std::snprintf(buf, sizeof(buf), "  %-22s %-13s %9.2f %7.2f   (%.2f, %.2f)\n",
                      c.config.nonparametric ? "mu1" : to_string(c.config.mean),
                      c.config.nonparametric ? "" : to_string(c.config.cov),
                      e->estimate, e->se, e->ci_lower, e->ci_upper);
        os << buf;
      }
      os << "\n";
    }
  }

  os << "mu2 vs mu3 agreement (max scaled gap per configuration)\n";
  for (const auto& c : r.results) {
    if (c.config.nonparametric) continue;
    std::snprintf(buf, sizeof(buf), "  %-22s %-13s %10.3e\n", to_string(c.config.mean), to_string(c.config.cov), c.theorem_gap);
    os << buf;
  }

  bool any_tests = false;
  for (const auto& c : r.results) any_tests = any_tests || !c.iu_tests.empty() || !c.positive_control_tests.empty();
  if (any_tests) {
    os << "\nQT prolongation tests\n";
    for (const auto& c : r.results) {
      for (size_t a = 0; a < c.iu_tests.size(); ++a) {
        const auto& iu = c.iu_tests[a];
        const char* label = a < c.test_treatments.size() ? c.test_treatments[a].c_str() : "?";
        std::snprintf(buf, sizeof(buf), "  %-28s %-3s IU: %-14s", c.config.name().c_str(),
                      label, iu.reject ? "reject" : "fail-to-reject");
        os << buf;
        if (a < c.positive_control_tests.size()) {
          const auto& pc = c.positive_control_tests[a];
          std::snprintf(buf, sizeof(buf), "  positive-control: %-14s (critical value %.3f)", pc.reject ? "reject" : "fail-to-reject", pc.critical_value);
          os << buf;
        }
        os << "\n";
      }
    }
  }
  return os.str();
}

std::string render_csv(const AnalysisReport& r) {
  json meta = report_to_json_value(r);
  meta.erase("results");
  json headers = json::array();
  for (const auto& c : r.results) headers.push_back(config_header_json(c));
  meta["configs"] = std::move(headers);

  std::ostringstream os;
  os << "# xover analysis report\n";
  os << "# meta " << meta.dump() << "\n";
  os << "estimator,mean,cov,treatment,time,estimate,se,ci_lower,ci_upper,df\n";
  for (const auto& c : r.results) {
    for (const auto& e : c.estimates) {
      os << (c.config.nonparametric ? "mu1" : "mu2") << ','
         << (c.config.nonparametric ? "" : to_string(c.config.mean)) << ','
         << (c.config.nonparametric ? "" : to_string(c.config.cov)) << ','
         << e.treatment_label << ',' << format_full(e.time_label) << ','
         << format_full(e.estimate) << ',' << format_full(e.se) << ','
         << format_full(e.ci_lower) << ',' << format_full(e.ci_upper) << ',' << e.df << '\n';
    }
  }
  return os.str();
}

}  // namespace

void AnalysisReport::validate() const {
  if (results.empty()) throw ValidationError("analysis report has no configurations");
  if (n < 1 || P < 2 || T < 1) throw ValidationError("analysis report has an invalid dataset summary");
  // Every configuration must cover the same treatments (a subset of the
  // active arms is fine), each with the full timepoint grid.
  std::vector<int> treatments;
  for (const auto& e : results.front().estimates) {
    if (std::find(treatments.begin(), treatments.end(), e.treatment) == treatments.end()) treatments.push_back(e.treatment);
  }
  if (treatments.empty()) throw ValidationError("analysis report has no estimates");
  const size_t expected = treatments.size() * static_cast<size_t>(T);
  for (const auto& c : results) {
    if (c.estimates.size() != expected) {
      throw ValidationError("configuration " + c.config.name() + " has " + std::to_string(c.estimates.size()) + " estimates, expected " + std::to_string(expected));
    }
    for (int z : treatments) {
      for (int t = 0; t < T; ++t) {
        const bool found = std::any_of(c.estimates.begin(), c.estimates.end(),
                                       [&](const EffectEstimate& e) { return e.treatment == z && e.time == t; });
        if (!found) {
          throw ValidationError("configuration " + c.config.name() + " is missing the estimate for treatment " + std::to_string(z) + " at timepoint " + std::to_string(t));
        }
      }
    }
    for (const auto& e : c.estimates) {
      if (!(e.ci_lower <= e.ci_upper)) throw ValidationError("confidence bounds out of order");
    }
  }
}

std::string render_table(const AnalysisReport& report, ReportStyle style) {
  report.validate();
  switch (style) {
    case ReportStyle::PAPER_TABLE: return render_paper_table(report);
    case ReportStyle::CSV: return render_csv(report);
    case ReportStyle::JSON: return report_to_json_value(report).dump(2) + "\n";
  }
  throw ValidationError("unknown report style");
}

AnalysisReport analysis_report_from_json(const std::string& text) {
  try {
    return report_from_json_value(json::parse(text));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report JSON parse failure: ") + e.what());
  }
}

AnalysisReport analysis_report_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  json meta;
  bool have_meta = false;
  std::vector<std::string> rows;
  while (std::getline(in, line)) {
    if (line.rfind("# meta ", 0) == 0) {
      try {
        meta = json::parse(line.substr(7));
      } catch (const json::exception& e) {
        throw ValidationError(std::string("report CSV meta parse failure: ") + e.what());
      }
      have_meta = true;
    } else if (!line.empty() && line[0] != '#' && line.rfind("estimator,", 0) != 0) {
      rows.push_back(line);
    }
  }
  if (!have_meta) throw ValidationError("report CSV is missing the meta line");

  // Rebuild the JSON document from the meta block and the data rows, then
  // reuse the JSON reader.
  json doc = meta;
  json results = json::array();
  const json& headers = meta.at("configs");
  size_t row_idx = 0;
  for (const auto& header : headers) {
    json jc = header;
    json est = json::array();
    const bool np = header.at("estimator").get<std::string>() == "mu1";
    while (row_idx < rows.size()) {
      std::istringstream rs(rows[row_idx]);
      std::vector<std::string> f;
      std::string field;
      while (std::getline(rs, field, ',')) f.push_back(field);
      if (f.size() != 10) throw ValidationError("report CSV row has wrong field count: " + rows[row_idx]);
      const bool row_np = f[0] == "mu1";
      if (row_np != np) break;
      if (!np && (f[1] != header.at("mean").get<std::string>() || f[2] != header.at("cov").get<std::string>())) break;
      json je;
      je["treatment"] = f[3];
      je["time"] = std::stod(f[4]);
      je["estimate"] = std::stod(f[5]);
      je["se"] = std::stod(f[6]);
      je["ci_lower"] = std::stod(f[7]);
      je["ci_upper"] = std::stod(f[8]);
      je["df"] = std::stoi(f[9]);
      est.push_back(std::move(je));
      ++row_idx;
    }
    jc["estimates"] = std::move(est);
    results.push_back(std::move(jc));
  }
  doc.erase("configs");
  doc["results"] = std::move(results);
  return report_from_json_value(doc);
}

}  // namespace xover
