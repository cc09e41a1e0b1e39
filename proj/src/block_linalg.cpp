#include "xover/block_linalg.hpp"

#include <Eigen/Dense>

#include "xover/errors.hpp"

namespace xover {

namespace {

void check_symmetry(const Eigen::MatrixXd& M, const char* name) {
  const double scale = 1.0 + M.cwiseAbs().maxCoeff();
  const double asym = (M - M.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * scale) {
    throw ValidationError(std::string(name) + " block is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
}

// Factorizes a symmetric matrix and rejects reciprocal condition estimates
// below 1e-12, naming the factor.
Eigen::LDLT<Eigen::MatrixXd> factorize(const Eigen::MatrixXd& M, const std::string& factor) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
  if (ldlt.info() != Eigen::Success) throw SingularMatrixError(factor, 0.0);
  const double rcond = ldlt.rcond();
  if (!(rcond > 1e-12)) throw SingularMatrixError(factor, rcond);
  return ldlt;
}

}  // namespace

BlockExchangeableMatrix::BlockExchangeableMatrix(Eigen::MatrixXd A, Eigen::MatrixXd B, int P)
    : A_(std::move(A)), B_(std::move(B)), P_(P) {
  if (P_ < 1) throw ValidationError("block count P must be >= 1");
  if (A_.rows() != A_.cols() || B_.rows() != B_.cols() || A_.rows() != B_.rows()) {
    throw ValidationError("A and B must be square matrices of equal size");
  }
  check_symmetry(A_, "A");
  check_symmetry(B_, "B");
  A_ = ((A_ + A_.transpose()) / 2.0).eval();
  B_ = ((B_ + B_.transpose()) / 2.0).eval();
  factorize(A_, "A");
  if (P_ > 1) {
    factorize(A_ - B_, "A-B");
    factorize(A_ + (P_ - 1) * B_, "A+(P-1)B");
  }
}

Eigen::MatrixXd BlockExchangeableMatrix::expand() const {
  const Eigen::Index T = A_.rows();
  Eigen::MatrixXd M(P_ * T, P_ * T);
  for (int p = 0; p < P_; ++p) {
    for (int q = 0; q < P_; ++q) {
      M.block(p * T, q * T, T, T) = (p == q) ? A_ : B_;
    }
  }
  return M;
}

Eigen::MatrixXd BlockInverse::expand() const {
  const Eigen::Index T = C.rows();
  Eigen::MatrixXd M(P * T, P * T);
  for (int p = 0; p < P; ++p) {
    for (int q = 0; q < P; ++q) {
      M.block(p * T, q * T, T, T) = (p == q) ? C : D;
    }
  }
  return M;
}

Eigen::MatrixXd BlockInverse::apply(const Eigen::MatrixXd& rhs) const {
  const Eigen::Index T = C.rows();
  if (rhs.rows() != P * T) throw ValidationError("block apply: right-hand side has wrong number of rows");
  // (C - D) r_p + D * sum_q r_q per block row.
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(T, rhs.cols());
  for (int p = 0; p < P; ++p) total += rhs.middleRows(p * T, T);
  const Eigen::MatrixXd CmD = C - D;
  Eigen::MatrixXd out(rhs.rows(), rhs.cols());
  for (int p = 0; p < P; ++p) {
    out.middleRows(p * T, T).noalias() = CmD * rhs.middleRows(p * T, T);
    out.middleRows(p * T, T).noalias() += D * total;
  }
  return out;
}

BlockInverse block_inverse(const BlockExchangeableMatrix& M) {
  const Eigen::Index T = M.T();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(T, T);
  BlockInverse inv;
  inv.P = M.P();
  if (M.P() == 1) {
    inv.C = factorize(M.A(), "A").solve(I);
    inv.D = Eigen::MatrixXd::Zero(T, T);
    return inv;
  }
  const Eigen::MatrixXd Minv = factorize(M.A() - M.B(), "A-B").solve(I);
  const Eigen::MatrixXd Sinv = factorize(M.A() + (M.P() - 1) * M.B(), "A+(P-1)B").solve(I);
  inv.D = (Sinv - Minv) / static_cast<double>(M.P());
  inv.C = Minv + inv.D;
  return inv;
}

Eigen::VectorXd solve_block(const BlockExchangeableMatrix& M, const Eigen::VectorXd& rhs) {
  return block_inverse(M).apply(rhs);
}

}  // namespace xover
