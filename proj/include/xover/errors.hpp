#ifndef XOVER_ERRORS_HPP
#define XOVER_ERRORS_HPP

#include <stdexcept>
#include <string>
#include <vector>

namespace xover {

// Base class for all errors raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input file (bad row, bad number, missing column).
struct ParseError : Error {
  ParseError(const std::string& msg, long line) : Error(msg + " (line " + std::to_string(line) + ")"), line(line) {}
  long line;
};

// Structurally invalid data or arguments.
struct ValidationError : Error {
  using Error::Error;
};

// A required matrix factor is singular or nearly so.
struct SingularMatrixError : Error {
  SingularMatrixError(const std::string& factor, double rcond_est)
      : Error("singular factor " + factor + " (rcond ~ " + std::to_string(rcond_est) + ")"),
        factor(factor),
        rcond(rcond_est) {}
  std::string factor;
  double rcond;
};

// Iterative fit did not converge; carries the last iterate.
struct FitError : Error {
  FitError(const std::string& msg, std::vector<double> last_beta)
      : Error(msg), last_beta(std::move(last_beta)) {}
  std::vector<double> last_beta;
};

}  // namespace xover

#endif
