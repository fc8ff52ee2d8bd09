#pragma once

#include "attnflow/linalg.hpp"

namespace attnflow {

/// Result of log-domain Sinkhorn-Knopp on an n x m cost matrix with uniform
/// weights. The converged kernel is kappa_ij = exp(f_i + g_j - cost_ij); its
/// row averages (1/m) sum_j kappa_ij and column averages (1/n) sum_i kappa_ij
/// equal 1 within the residual.
struct SinkhornScalings {
  Vector f, g;
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Alternating row/column normalization in the log domain; stops when the
/// worst marginal deviation drops below tol. Never throws on non-convergence
/// (callers decide); residual always reports the final deviation.
SinkhornScalings sinkhorn_log_domain(const Matrix& cost, int max_iters, double tol);

/// Materialize kappa_ij = exp(f_i + g_j - cost_ij).
Matrix sinkhorn_kernel_matrix(const SinkhornScalings& s, const Matrix& cost);

}  // namespace attnflow
