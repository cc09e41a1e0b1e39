#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/builders.hpp"
#include "xover/errors.hpp"
#include "xover/trial_data.hpp"

using namespace xover;

namespace {

struct TempFile {
  std::filesystem::path path;
  explicit TempFile(const std::string& contents) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() / ("xover_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + ".csv");
    std::ofstream out(path);
    out << contents;
  }
  ~TempFile() { std::error_code ec; std::filesystem::remove(path, ec); }
};

// Two subjects, two periods, two timepoints, complete.
const char* kSmallCsv =
    "subject,period,treatment,baseline,time,qtc\n"
    "a,1,X,400,0.5,410\n"
    "a,1,X,400,1,412\n"
    "a,2,PBO,402,0.5,405\n"
    "a,2,PBO,402,1,406\n"
    "b,1,PBO,398,0.5,399\n"
    "b,1,PBO,398,1,401\n"
    "b,2,X,396,0.5,408\n"
    "b,2,X,396,1,409\n";

}  // namespace

TEST_CASE("ingest parses a complete long CSV") {
  TempFile f(kSmallCsv);
  const auto res = ingest_csv(f.path.string(), "PBO");
  const TrialDataset& ds = res.dataset;
  CHECK(ds.n == 2);
  CHECK(ds.P == 2);
  CHECK(ds.T == 2);
  CHECK(res.dropped_subjects.empty());
  CHECK(ds.treatment_labels[0] == "PBO");
  CHECK(ds.treatment_labels[1] == "X");
  CHECK(ds.timepoint_labels == std::vector<double>{0.5, 1.0});
  CHECK(ds.Z(0, 0) == 1);  // subject a had X in period 1
  CHECK(ds.Z(0, 1) == 0);
  CHECK(ds.y(0, 0, 1) == 412);
  CHECK(ds.y(1, 1, 0) == 408);
  CHECK(ds.X(1, 0) == 398);
}

TEST_CASE("single complete subject is accepted") {
  TempFile f(
      "subject,period,treatment,baseline,time,qtc\n"
      "solo,1,A,400,1,405\n"
      "solo,2,PBO,401,1,402\n");
  const auto res = ingest_csv(f.path.string(), "PBO");
  CHECK(res.dataset.n == 1);
  CHECK(res.dataset.P == 2);
  CHECK(res.dataset.T == 1);
}

TEST_CASE("subject with a missing period is dropped with a report") {
  std::string csv = kSmallCsv;
  csv +=
      "c,1,X,395,0.5,401\n"
      "c,1,X,395,1,403\n";  // subject c lacks period 2 entirely
  TempFile f(csv);
  const auto res = ingest_csv(f.path.string(), "PBO");
  CHECK(res.dataset.n == 2);
  REQUIRE(res.dropped_subjects.size() == 1);
  CHECK(res.dropped_subjects[0] == "c");
}

TEST_CASE("subject with one missing cell is dropped, others bit-identical") {
  // Build a complete file, then delete one row of subject b.
  std::istringstream all(kSmallCsv);
  std::string line, without;
  int i = 0;
  while (std::getline(all, line)) {
    if (line.rfind("b,2,X,396,1", 0) == 0) continue;
    without += line + "\n";
    ++i;
  }
  TempFile complete(kSmallCsv), incomplete(without);
  const auto full = ingest_csv(complete.path.string(), "PBO");
  const auto part = ingest_csv(incomplete.path.string(), "PBO");
  CHECK(part.dataset.n == full.dataset.n - 1);
  REQUIRE(part.dropped_subjects == std::vector<std::string>{"b"});
  CHECK(part.dataset.X.row(0) == full.dataset.X.row(0));
  CHECK(part.dataset.Y.row(0) == full.dataset.Y.row(0));
}

TEST_CASE("malformed rows raise ParseError with the line number") {
  SUBCASE("bad number") {
    TempFile f(
        "subject,period,treatment,baseline,time,qtc\n"
        "a,1,X,400,0.5,oops\n");
    CHECK_THROWS_WITH_AS(ingest_csv(f.path.string(), "PBO"), doctest::Contains("line 2"), ParseError);
  }
  SUBCASE("wrong field count") {
    TempFile f(
        "subject,period,treatment,baseline,time,qtc\n"
        "a,1,X,400,0.5\n");
    CHECK_THROWS_AS(ingest_csv(f.path.string(), "PBO"), ParseError);
  }
  SUBCASE("missing column") {
    TempFile f("subject,period,treatment,baseline,time\n");
    CHECK_THROWS_AS(ingest_csv(f.path.string(), "PBO"), ParseError);
  }
  SUBCASE("duplicate cell") {
    std::string csv(kSmallCsv);
    csv += "a,1,X,400,0.5,411\n";
    TempFile f(csv);
    CHECK_THROWS_WITH_AS(ingest_csv(f.path.string(), "PBO"), doctest::Contains("duplicate"), ParseError);
  }
}

TEST_CASE("treatments that are not a permutation name the subject") {
  TempFile f(
      "subject,period,treatment,baseline,time,qtc\n"
      "a,1,X,400,1,410\n"
      "a,2,X,401,1,411\n"
      "b,1,X,398,1,399\n"
      "b,2,PBO,397,1,401\n");
  CHECK_THROWS_WITH_AS(ingest_csv(f.path.string(), "PBO"), doctest::Contains("a"), ValidationError);
}

TEST_CASE("inconsistent timepoint grids across periods are a validation error") {
  TempFile f(
      "subject,period,treatment,baseline,time,qtc\n"
      "a,1,X,400,0.5,410\n"
      "a,2,PBO,402,1.5,405\n"
      "b,1,PBO,398,0.5,399\n"
      "b,2,X,396,1.5,408\n");
  CHECK_THROWS_WITH_AS(ingest_csv(f.path.string(), "PBO"), doctest::Contains("timepoint"), ValidationError);
}

TEST_CASE("unknown placebo label is rejected") {
  TempFile f(kSmallCsv);
  CHECK_THROWS_AS(ingest_csv(f.path.string(), "NOPE"), ValidationError);
}

TEST_CASE("average_baseline equals the arithmetic mean") {
  TrialDataset ds = testing::make_tiny_dataset(4, 4, 2, 31);
  SUBCASE("constant baselines") {
    ds.X.row(0) << 400, 402, 398, 400;
    CHECK(average_baseline(ds, 0) == doctest::Approx(400.0));
    ds.X.row(0).setZero();
    CHECK(average_baseline(ds, 0) == 0.0);
  }
  SUBCASE("oracle") {
    double acc = 0.0;
    for (int p = 0; p < ds.P; ++p) acc += ds.X(1, p);
    CHECK(average_baseline(ds, 1) == doctest::Approx(acc / ds.P).epsilon(1e-14));
  }
  CHECK_THROWS_AS(average_baseline(ds, 99), ValidationError);
}

TEST_CASE("ingest -> serialize -> ingest is the identity") {
  const TrialDataset ds = testing::make_tiny_dataset(5, 3, 4, 77);
  const auto tmp = std::filesystem::temp_directory_path() / "xover_roundtrip.csv";
  write_csv(ds, tmp.string());
  const auto back = ingest_csv(tmp.string(), ds.treatment_labels[0]);
  std::filesystem::remove(tmp);
  CHECK(back.dataset.n == ds.n);
  CHECK(back.dataset.subject_ids == ds.subject_ids);
  CHECK(back.dataset.timepoint_labels == ds.timepoint_labels);
  CHECK(back.dataset.treatment_labels == ds.treatment_labels);
  CHECK(back.dataset.X == ds.X);
  CHECK(back.dataset.Z == ds.Z);
  CHECK(back.dataset.Y == ds.Y);
}
