#pragma once

#include <vector>

#include "attnflow/sinkhorn.hpp"
#include "attnflow/types.hpp"

namespace attnflow {

/// Optimal entropic coupling between two Gaussians: a Gaussian on R^{2d} with
/// diagonal blocks Sigma, Omega and off-diagonal block A^{-1} C^T.
struct GaussianCoupling {
  Vector mean;        // (alpha, beta) stacked
  Matrix covariance;  // 2d x 2d

  int dim() const { return static_cast<int>(mean.size()) / 2; }
  Matrix cross() const {  // Cov(x, y), upper-right d x d block
    const int d = dim();
    return covariance.block(0, d, d, d);
  }
};

/// Exact W_p (p in {1,2}) between equal-size empirical measures via an
/// O(n^3) assignment solve; capped at n = 2048.
double wasserstein_discrete(int p, const std::vector<Vector>& X, const std::vector<Vector>& Y);

/// Slice-wise W_2 over a shared position marginal:
/// (sum_tau theta(tau) W_2(mu^tau, nu^tau)^2)^{1/2}. Position multisets must
/// match within 1e-12.
double conditional_wasserstein(const EmpiricalMeasure& mu_bar, const EmpiricalMeasure& nu_bar);

/// W_2 between Gaussians:
/// sqrt(|a-b|^2 + tr(S + O - 2 (S^{1/2} O S^{1/2})^{1/2})).
double bures_wasserstein(const GaussianMeasure& g1, const GaussianMeasure& g2);

/// Closed-form optimal coupling of OT_eps between Gaussians for the cost
/// |Qx - Ky|^2 / (2 eps); requires A = K^T Q invertible.
GaussianCoupling eot_gaussian_coupling(const GaussianMeasure& g1, const GaussianMeasure& g2,
                                       const Matrix& Q, const Matrix& K, double eps);

/// OT_eps value: E_pi[c_eps] + KL(pi || mu (x) nu), both closed-form.
double eot_gaussian_value(const GaussianMeasure& g1, const GaussianMeasure& g2, const Matrix& Q,
                          const Matrix& K, double eps);

/// Entropy-regularized Bures: 2 eps OT_eps between the centered Gaussians.
double entropic_bures(const Matrix& sigma1, const Matrix& sigma2, const Matrix& Q,
                      const Matrix& K, double eps);

/// Discrete entropic OT between two sample clouds (uniform weights); the plan
/// is kappa_ij / (n m). Used as the Monte-Carlo oracle for the Gaussian
/// closed forms.
struct DiscretePlan {
  Matrix kappa;
  double marginal_residual = 0.0;
  int iterations = 0;

  Matrix cross_covariance(const std::vector<Vector>& X, const std::vector<Vector>& Y) const;
  /// Plan cost + KL against the uniform product measure.
  double objective(const std::vector<Vector>& X, const std::vector<Vector>& Y, const Matrix& Q,
                   const Matrix& K, double eps) const;
};

DiscretePlan sinkhorn_plan_discrete(const std::vector<Vector>& X, const std::vector<Vector>& Y,
                                    const Matrix& Q, const Matrix& K, double eps,
                                    int max_iters = 10000, double tol = 1e-10);

}  // namespace attnflow
