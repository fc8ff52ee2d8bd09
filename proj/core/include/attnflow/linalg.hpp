#pragma once

#include <Eigen/Core>

#include "attnflow/error.hpp"

namespace attnflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Eigendecomposition S = U diag(w) U^T with w sorted descending and U orthogonal.
struct SymEig {
  Vector eigenvalues;
  Matrix eigenvectors;
};

/// Frobenius-relative symmetry test: ||S - S^T||_F <= rel_tol * (1 + ||S||_F).
bool is_symmetric(const Matrix& s, double rel_tol = 1e-10);

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Throws NotSymmetric if the input fails the 1e-10 relative symmetry test.
SymEig sym_eig(const Matrix& s);

/// Symmetric PSD square root. Eigenvalues in [-1e-10*lambda_max, 0) are clamped
/// to zero; anything more negative throws NotPsd.
Matrix psd_sqrt(const Matrix& s);

/// Number of eigenvalues above rel_tol * max(lambda_max, 1e-300).
int rank_eps(const Matrix& s, double rel_tol = 1e-6);

/// Solve S x = b for SPD S. Throws IllConditioned if lambda_max/lambda_min >= 1e12
/// or S is not positive definite.
Vector solve_spd(const Matrix& s, const Vector& b);

/// Inverse of an SPD matrix, same conditioning contract as solve_spd.
Matrix inverse_spd(const Matrix& s);

/// log det of an SPD matrix via the eigenvalue sum. Throws NotSpd on a
/// non-positive spectrum.
double log_det_spd(const Matrix& s);

/// Spectral norm sqrt(lambda_max(M^T M)) of a general rectangular matrix.
double spectral_norm(const Matrix& m);

}  // namespace attnflow
