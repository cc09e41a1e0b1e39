#ifndef XOVER_BLOCK_LINALG_HPP
#define XOVER_BLOCK_LINALG_HPP

#include <Eigen/Core>

namespace xover {

// PT x PT matrix made of P x P blocks of size T x T, with A on the diagonal
// and B everywhere else:
//
//   | A B ... B |
//   | B A ... B |
//   | :       : |
//   | B B ... A |
//
// Layout convention everywhere in this library is period-major: flat index
// p*T + t for period p and timepoint t.
class BlockExchangeableMatrix {
 public:
  // Inputs are symmetrized ((M + M^T)/2); asymmetry beyond 1e-8 relative to
  // the max entry is rejected. Construction verifies that A, A - B and
  // A + (P-1)B are all invertible (reciprocal condition estimate > 1e-12)
  // and reports which factor failed.
  BlockExchangeableMatrix(Eigen::MatrixXd A, Eigen::MatrixXd B, int P);

  int P() const { return P_; }
  Eigen::Index T() const { return A_.rows(); }
  const Eigen::MatrixXd& A() const { return A_; }
  const Eigen::MatrixXd& B() const { return B_; }

  Eigen::MatrixXd expand() const;

 private:
  Eigen::MatrixXd A_, B_;
  int P_;
};

// Inverse of a BlockExchangeableMatrix; same shape with blocks C and D.
struct BlockInverse {
  Eigen::MatrixXd C, D;
  int P = 0;

  Eigen::MatrixXd expand() const;

  // Computes M^{-1} * rhs for a PT x m right-hand side without forming the
  // dense PT x PT inverse.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& rhs) const;
};

// Structured inversion: only (A - B) and (A + (P-1)B) are factorized, never
// the dense PT x PT matrix. With Minv = (A-B)^{-1} and Sinv = (A+(P-1)B)^{-1},
//   C = Minv + (Sinv - Minv)/P,   D = (Sinv - Minv)/P.
BlockInverse block_inverse(const BlockExchangeableMatrix& M);

// V^{-1} * rhs for a PT-vector (or PT x m matrix) right-hand side.
Eigen::VectorXd solve_block(const BlockExchangeableMatrix& M, const Eigen::VectorXd& rhs);

}  // namespace xover

#endif
