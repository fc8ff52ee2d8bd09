#pragma once

#include <utility>

#include "attnflow/sinkhorn.hpp"
#include "attnflow/types.hpp"

namespace attnflow {

/// Converged Sinkhorn kernel on the support of an empirical measure, together
/// with the dual potentials needed to evaluate kappa(x, x_j) at off-support
/// queries via the Schroedinger system.
struct DiscreteKernel {
  Matrix kappa;  // n x n, bistochastic w.r.t. uniform weights
  Vector f, g;   // kappa_ij = exp(f_i + g_j - c_ij)
  double marginal_residual = 0.0;
  int iterations = 0;

  int size() const { return static_cast<int>(kappa.rows()); }
};

/// Sinkhorn-Knopp on kappa^0 = exp(-|Q x_i - K x_j|^2 / (2 eps)). Throws
/// NotConverged(max_iters, residual) if the marginal deviation never drops
/// below tol.
DiscreteKernel sinkhorn_kernel_discrete(const EmpiricalMeasure& mu, const AttentionParams& params,
                                        int max_iters = 10000, double tol = 1e-10);

/// Kernel row kappa(x, x_j) at an arbitrary query x, from the stored column
/// scalings: f(x) = -log((1/n) sum_j exp(g_j - c(x, x_j))).
Vector kernel_row_at(const DiscreteKernel& kernel, const EmpiricalMeasure& mu,
                     const AttentionParams& params, const Vector& x);

/// Velocity field Gamma_mu(x) of the given variant on an empirical measure.
/// Sinkhorn requires a converged kernel for mu.
Vector velocity_discrete(const AttentionParams& params, const EmpiricalMeasure& mu,
                         const Vector& x, const DiscreteKernel* kernel = nullptr);

/// Closed-form affine velocity field on a Gaussian measure.
/// Supported: Softmax, Linear, LinearEps, L2, Sinkhorn, MultiHead.
AffineField velocity_gaussian(const AttentionParams& params, const GaussianMeasure& g);

/// Masked velocity at query (sigma, x): the inner variant evaluated on the
/// sub-measure of tokens with position <= sigma. First component is exactly 0.
std::pair<double, Vector> velocity_masked(const AttentionParams& params,
                                          const EmpiricalMeasure& mu_bar, double sigma,
                                          const Vector& x);

namespace detail {

/// Gamma_X evaluated at every row of X (tokens as rows). Sinkhorn builds one
/// kernel per call; throws NotConverged like sinkhorn_kernel_discrete.
Matrix velocity_batch(const AttentionParams& params, const Matrix& X);

/// Masked batch: token i queries at its own position tau_i.
Matrix velocity_batch_masked(const AttentionParams& params, const Matrix& X,
                             const std::vector<double>& positions);

Matrix tokens_to_matrix(const std::vector<Vector>& tokens);
std::vector<Vector> matrix_to_tokens(const Matrix& X);

/// Internal moment-ODE right-hand side shared with velocity_gaussian; skips
/// GaussianMeasure validation so integrators can call it per stage.
AffineField gaussian_field(const AttentionParams& params, const Vector& alpha,
                           const Matrix& sigma);

/// Lemma 4.10-style C matrix for the Gaussian Sinkhorn field. The flag selects
/// the inner product A^T Sigma A (default) or A Sigma A^T (the alternative form
/// that appears in the covariance proposition); the validation suite compares
/// both against the discrete-Sinkhorn Monte-Carlo oracle.
Matrix sinkhorn_gaussian_c(const Matrix& sigma, const Matrix& A, double eps,
                           bool inner_at_sigma_a = true);

}  // namespace detail

}  // namespace attnflow
