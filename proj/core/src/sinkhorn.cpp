#include "attnflow/sinkhorn.hpp"

#include <cmath>

namespace attnflow {

namespace {

// log((1/len) sum_k exp(v_k)) with max subtraction
double log_mean_exp(const double* v, Eigen::Index len) {
  double m = v[0];
  for (Eigen::Index k = 1; k < len; ++k) m = std::max(m, v[k]);
  double acc = 0.0;
  for (Eigen::Index k = 0; k < len; ++k) acc += std::exp(v[k] - m);
  return m + std::log(acc / static_cast<double>(len));
}

}  // namespace

SinkhornScalings sinkhorn_log_domain(const Matrix& cost, int max_iters, double tol) {
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  SinkhornScalings out;
  out.f = Vector::Zero(n);
  out.g = Vector::Zero(m);

  // After an (f, g) sweep the columns are exactly normalized and the row
  // deviation of the current state equals |exp(f_i - f'_i) - 1| where f' is
  // the next f-update, so the convergence test rides along with that update.
  Vector f_next(n), row_buf(m), col_buf(n);
  bool have_state = false;
  int iter = 0;
  for (; iter < max_iters; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) row_buf(j) = out.g(j) - cost(i, j);
      f_next(i) = -log_mean_exp(row_buf.data(), m);
    }
    if (have_state) {
      double residual = 0.0;
      for (Eigen::Index i = 0; i < n; ++i)
        residual = std::max(residual, std::abs(std::expm1(out.f(i) - f_next(i))));
      out.residual = residual;
      if (residual < tol) {
        out.converged = true;
        break;
      }
    }
    out.f = f_next;
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) col_buf(i) = out.f(i) - cost(i, j);
      out.g(j) = -log_mean_exp(col_buf.data(), n);
    }
    have_state = true;
  }
  out.iterations = iter;
  if (!out.converged && max_iters > 0) {
    double residual = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) row_buf(j) = out.g(j) - cost(i, j);
      const double lme = log_mean_exp(row_buf.data(), m);
      residual = std::max(residual, std::abs(std::expm1(out.f(i) + lme)));
    }
    out.residual = residual;
    out.converged = residual < tol;
  }
  return out;
}

Matrix sinkhorn_kernel_matrix(const SinkhornScalings& s, const Matrix& cost) {
  Matrix kappa(cost.rows(), cost.cols());
  for (Eigen::Index i = 0; i < cost.rows(); ++i)
    for (Eigen::Index j = 0; j < cost.cols(); ++j)
      kappa(i, j) = std::exp(s.f(i) + s.g(j) - cost(i, j));
  return kappa;
}

}  // namespace attnflow
