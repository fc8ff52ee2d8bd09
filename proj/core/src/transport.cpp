#include <Eigen/LU>
#include "attnflow/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace attnflow {

namespace {

constexpr int kAssignmentCap = 2048;

// Shortest-augmenting-path assignment on a dense square cost matrix,
// O(n^3). Returns the minimal total cost over perfect matchings.
double assignment_cost(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<double> minv(n + 1);
  std::vector<char> used(n + 1);

  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j)
    if (p[j]) total += cost(p[j] - 1, j - 1);
  return total;
}

void check_spd_input(const Matrix& s, const char* what) {
  SymEig e = sym_eig(s);
  const double lmax = std::max(e.eigenvalues(0), 0.0);
  if (e.eigenvalues(e.eigenvalues.size() - 1) < -1e-10 * lmax)
    fail(Errc::NotPsd, std::string(what) + " is not PSD");
}

Matrix half_power(const Matrix& spd, double exponent) {
  SymEig e = sym_eig(spd);
  if (!(e.eigenvalues(e.eigenvalues.size() - 1) > 0.0))
    fail(Errc::NotSpd, "matrix power needs an SPD input");
  Vector w = e.eigenvalues.array().pow(exponent);
  return e.eigenvectors * w.asDiagonal() * e.eigenvectors.transpose();
}

}  // namespace

double wasserstein_discrete(int p, const std::vector<Vector>& X, const std::vector<Vector>& Y) {
  if (p != 1 && p != 2) fail(Errc::InvalidArgument, "only p in {1,2} supported");
  if (X.empty() || X.size() != Y.size()) fail(Errc::SizeMismatch, "need equal nonzero sizes");
  const int n = static_cast<int>(X.size());
  if (n > kAssignmentCap) fail(Errc::TooLarge, "exact assignment capped at n = 2048");
  if (X.front().size() != Y.front().size())
    fail(Errc::DimensionMismatch, "token dimensions differ");

  Matrix cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double dist = (X[i] - Y[j]).norm();
      cost(i, j) = p == 2 ? dist * dist : dist;
    }
  const double total = assignment_cost(cost);
  const double mean = std::max(total, 0.0) / n;
  return p == 2 ? std::sqrt(mean) : mean;
}

double conditional_wasserstein(const EmpiricalMeasure& mu_bar, const EmpiricalMeasure& nu_bar) {
  if (!mu_bar.positions || !nu_bar.positions)
    fail(Errc::InvalidArgument, "conditional Wasserstein needs positions on both measures");
  if (mu_bar.size() != nu_bar.size())
    fail(Errc::MarginalMismatch, "time marginals differ (unequal token counts)");
  const int n = mu_bar.size();

  auto sorted_order = [](const EmpiricalMeasure& m) {
    std::vector<int> idx(m.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return (*m.positions)[a] < (*m.positions)[b]; });
    return idx;
  };
  const auto mi = sorted_order(mu_bar);
  const auto ni = sorted_order(nu_bar);
  for (int r = 0; r < n; ++r)
    if (std::abs((*mu_bar.positions)[mi[r]] - (*nu_bar.positions)[ni[r]]) > 1e-12)
      fail(Errc::MarginalMismatch, "position multisets differ beyond 1e-12");

  double acc = 0.0;
  int start = 0;
  while (start < n) {
    int end = start + 1;
    const double tau = (*mu_bar.positions)[mi[start]];
    while (end < n && (*mu_bar.positions)[mi[end]] - tau <= 1e-12) ++end;
    std::vector<Vector> xs, ys;
    xs.reserve(end - start);
    ys.reserve(end - start);
    for (int r = start; r < end; ++r) {
      xs.push_back(mu_bar.tokens[mi[r]]);
      ys.push_back(nu_bar.tokens[ni[r]]);
    }
    const double w2 = wasserstein_discrete(2, xs, ys);
    acc += (static_cast<double>(end - start) / n) * w2 * w2;
    start = end;
  }
  return std::sqrt(acc);
}

double bures_wasserstein(const GaussianMeasure& g1, const GaussianMeasure& g2) {
  if (g1.dim() != g2.dim()) fail(Errc::DimensionMismatch, "dimensions differ");
  check_spd_input(g1.sigma, "first covariance");
  check_spd_input(g2.sigma, "second covariance");
  const Matrix s = psd_sqrt(g1.sigma);
  const Matrix cross = psd_sqrt(Matrix(s * g2.sigma * s));
  const double tr = (g1.sigma + g2.sigma - 2.0 * cross).trace();
  const double d2 = (g1.alpha - g2.alpha).squaredNorm() + std::max(tr, 0.0);
  return std::sqrt(std::max(d2, 0.0));
}

GaussianCoupling eot_gaussian_coupling(const GaussianMeasure& g1, const GaussianMeasure& g2,
                                       const Matrix& Q, const Matrix& K, double eps) {
  const int d = g1.dim();
  if (g2.dim() != d || Q.cols() != d || K.cols() != d || Q.rows() != K.rows())
    fail(Errc::DimensionMismatch, "incompatible shapes");
  if (!(eps > 0.0)) fail(Errc::InvalidArgument, "eps must be positive");
  const Matrix A = K.transpose() * Q;
  {
    SymEig ea = sym_eig(Matrix(A.transpose() * A));
    if (!(ea.eigenvalues(d - 1) > 0.0) ||
        std::sqrt(ea.eigenvalues(0) / ea.eigenvalues(d - 1)) >= 1e10)
      fail(Errc::SingularA, "A = K^T Q must be invertible (cond < 1e10)");
  }
  SymEig es = sym_eig(g1.sigma);
  SymEig eo = sym_eig(g2.sigma);
  if (!(es.eigenvalues(d - 1) > 0.0)) fail(Errc::NotSpd, "Sigma must be SPD");
  if (!(eo.eigenvalues(d - 1) > 0.0)) fail(Errc::NotSpd, "Omega must be SPD");

  const Matrix oh = half_power(g2.sigma, 0.5);
  const Matrix ohi = half_power(g2.sigma, -0.5);
  Matrix inner = oh * A * g1.sigma * A.transpose() * oh;
  inner = 0.5 * (inner + inner.transpose());
  inner.diagonal().array() += eps * eps / 4.0;
  const Matrix c = oh * psd_sqrt(inner) * ohi - (eps / 2.0) * Matrix::Identity(d, d);
  const Matrix cross = A.partialPivLu().solve(Matrix(c.transpose()));

  GaussianCoupling out;
  out.mean.resize(2 * d);
  out.mean.head(d) = g1.alpha;
  out.mean.tail(d) = g2.alpha;
  out.covariance.resize(2 * d, 2 * d);
  out.covariance.topLeftCorner(d, d) = g1.sigma;
  out.covariance.bottomRightCorner(d, d) = g2.sigma;
  out.covariance.topRightCorner(d, d) = cross;
  out.covariance.bottomLeftCorner(d, d) = cross.transpose();
  return out;
}

double eot_gaussian_value(const GaussianMeasure& g1, const GaussianMeasure& g2, const Matrix& Q,
                          const Matrix& K, double eps) {
  const GaussianCoupling pi = eot_gaussian_coupling(g1, g2, Q, K, eps);
  const int d = pi.dim();
  const Matrix cross = pi.cross();

  const double mean_part = (Q * g1.alpha - K * g2.alpha).squaredNorm();
  const double cost = (mean_part + (Q * g1.sigma * Q.transpose()).trace() +
                       (K * g2.sigma * K.transpose()).trace() -
                       2.0 * (Q.transpose() * K * cross.transpose()).trace()) /
                      (2.0 * eps);

  // KL(pi || mu x nu) between Gaussians sharing a mean
  const Matrix sigma_inv = inverse_spd(g1.sigma);
  const Matrix omega_inv = inverse_spd(g2.sigma);
  const double tr = (sigma_inv * pi.covariance.topLeftCorner(d, d)).trace() +
                    (omega_inv * pi.covariance.bottomRightCorner(d, d)).trace();
  const double logdet =
      log_det_spd(g1.sigma) + log_det_spd(g2.sigma) - log_det_spd(pi.covariance);
  const double kl = 0.5 * (tr - 2.0 * d + logdet);
  return cost + kl;
}

double entropic_bures(const Matrix& sigma1, const Matrix& sigma2, const Matrix& Q,
                      const Matrix& K, double eps) {
  const int d = static_cast<int>(sigma1.rows());
  const GaussianMeasure g1(Vector::Zero(d), sigma1);
  const GaussianMeasure g2(Vector::Zero(d), sigma2);
  return 2.0 * eps * eot_gaussian_value(g1, g2, Q, K, eps);
}

DiscretePlan sinkhorn_plan_discrete(const std::vector<Vector>& X, const std::vector<Vector>& Y,
                                    const Matrix& Q, const Matrix& K, double eps, int max_iters,
                                    double tol) {
  if (X.empty() || Y.empty()) fail(Errc::InvalidArgument, "empty sample cloud");
  if (!(eps > 0.0)) fail(Errc::InvalidArgument, "eps must be positive");
  const int n = static_cast<int>(X.size());
  const int m = static_cast<int>(Y.size());
  Matrix cost(n, m);
  for (int i = 0; i < n; ++i) {
    const Vector qx = Q * X[i];
    for (int j = 0; j < m; ++j) cost(i, j) = (qx - K * Y[j]).squaredNorm() / (2.0 * eps);
  }
  SinkhornScalings s = sinkhorn_log_domain(cost, max_iters, tol);
  if (!s.converged)
    fail(Errc::NotConverged, "discrete EOT stopped with residual " + std::to_string(s.residual));
  DiscretePlan out;
  out.kappa = sinkhorn_kernel_matrix(s, cost);
  out.marginal_residual = s.residual;
  out.iterations = s.iterations;
  return out;
}

Matrix DiscretePlan::cross_covariance(const std::vector<Vector>& X,
                                      const std::vector<Vector>& Y) const {
  const int n = static_cast<int>(X.size());
  const int m = static_cast<int>(Y.size());
  const int d = static_cast<int>(X.front().size());
  Matrix xm(n, d), ym(m, d);
  for (int i = 0; i < n; ++i) xm.row(i) = X[i].transpose();
  for (int j = 0; j < m; ++j) ym.row(j) = Y[j].transpose();
  const Vector xbar = xm.colwise().mean().transpose();
  const Vector ybar = ym.colwise().mean().transpose();
  return xm.transpose() * kappa * ym / (static_cast<double>(n) * m) - xbar * ybar.transpose();
}

double DiscretePlan::objective(const std::vector<Vector>& X, const std::vector<Vector>& Y,
                               const Matrix& Q, const Matrix& K, double eps) const {
  const int n = static_cast<int>(X.size());
  const int m = static_cast<int>(Y.size());
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector qx = Q * X[i];
    for (int j = 0; j < m; ++j) {
      const double c = (qx - K * Y[j]).squaredNorm() / (2.0 * eps);
      const double k = kappa(i, j);
      acc += k * c + (k > 0.0 ? k * std::log(k) : 0.0);
    }
  }
  return acc / (static_cast<double>(n) * m);
}

}  // namespace attnflow
