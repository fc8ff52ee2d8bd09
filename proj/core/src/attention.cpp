#include <Eigen/LU>
#include "attnflow/attention.hpp"

#include <cmath>
#include <string>

namespace attnflow {

namespace {

Matrix sinkhorn_cost(const EmpiricalMeasure& mu, const AttentionParams& p) {
  const int n = mu.size();
  Matrix c(n, n);
  for (int i = 0; i < n; ++i) {
    const Vector qx = p.Q * mu.tokens[i];
    for (int j = 0; j < n; ++j) c(i, j) = (qx - p.K * mu.tokens[j]).squaredNorm() / (2.0 * p.eps);
  }
  return c;
}

Vector sinkhorn_cost_row(const EmpiricalMeasure& mu, const AttentionParams& p, const Vector& x) {
  const int n = mu.size();
  const Vector qx = p.Q * x;
  Vector c(n);
  for (int j = 0; j < n; ++j) c(j) = (qx - p.K * mu.tokens[j]).squaredNorm() / (2.0 * p.eps);
  return c;
}

Vector softmax_point(const Matrix& A, const Matrix& V, const std::vector<Vector>& tokens,
                     const Vector& x) {
  const Vector ax = A * x;
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& xj : tokens) m = std::max(m, ax.dot(xj));
  Vector num = Vector::Zero(x.size());
  double den = 0.0;
  for (const auto& xj : tokens) {
    const double w = std::exp(ax.dot(xj) - m);
    num += w * xj;
    den += w;
  }
  return V * (num / den);
}

Vector l2_point(const AttentionParams& p, const std::vector<Vector>& tokens, const Vector& x) {
  const Vector qx = p.Q * x;
  double m = std::numeric_limits<double>::infinity();
  for (const auto& xj : tokens) m = std::min(m, (qx - p.K * xj).squaredNorm());
  Vector num = Vector::Zero(x.size());
  double den = 0.0;
  for (const auto& xj : tokens) {
    const double w = std::exp(m - (qx - p.K * xj).squaredNorm());
    num += w * xj;
    den += w;
  }
  return p.V * (num / den);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

DiscreteKernel sinkhorn_kernel_discrete(const EmpiricalMeasure& mu, const AttentionParams& params,
                                        int max_iters, double tol) {
  params.validate(mu.dim());
  if (!(params.eps > 0.0)) fail(Errc::InvalidArgument, "sinkhorn needs eps > 0");
  const Matrix cost = sinkhorn_cost(mu, params);
  SinkhornScalings s = sinkhorn_log_domain(cost, max_iters, tol);
  if (!s.converged)
    fail(Errc::NotConverged, "sinkhorn stopped after " + std::to_string(s.iterations) +
                                 " iterations with marginal residual " + std::to_string(s.residual));
  DiscreteKernel k;
  k.kappa = sinkhorn_kernel_matrix(s, cost);
  k.f = std::move(s.f);
  k.g = std::move(s.g);
  k.marginal_residual = s.residual;
  k.iterations = s.iterations;
  return k;
}

Vector kernel_row_at(const DiscreteKernel& kernel, const EmpiricalMeasure& mu,
                     const AttentionParams& params, const Vector& x) {
  if (kernel.size() != mu.size()) fail(Errc::DimensionMismatch, "kernel size differs from measure");
  const int n = mu.size();
  const Vector c = sinkhorn_cost_row(mu, params, x);
  Vector e(n);
  double m = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) {
    e(j) = kernel.g(j) - c(j);
    m = std::max(m, e(j));
  }
  double acc = 0.0;
  for (int j = 0; j < n; ++j) acc += std::exp(e(j) - m);
  const double fx = -(m + std::log(acc / n));
  Vector row(n);
  for (int j = 0; j < n; ++j) row(j) = std::exp(fx + e(j));
  return row;
}

Vector velocity_discrete(const AttentionParams& params, const EmpiricalMeasure& mu,
                         const Vector& x, const DiscreteKernel* kernel) {
  params.validate(mu.dim());
  if (x.size() != mu.dim()) fail(Errc::DimensionMismatch, "query dimension differs from tokens");

  switch (params.variant) {
    case Variant::Softmax:
      return softmax_point(params.A(), params.V, mu.tokens, x);
    case Variant::Linear:
      return params.V * (mu.second_moment() * (params.A() * x));
    case Variant::LinearEps: {
      const Vector m = mu.mean();
      const Matrix cov = mu.second_moment() - m * m.transpose();
      return params.V * m / params.eps + params.V * (cov * (params.A() * x));
    }
    case Variant::L2:
      return l2_point(params, mu.tokens, x);
    case Variant::Exp:
    case Variant::ReLU:
    case Variant::Sigmoid: {
      const Vector ax = params.A() * x;
      Vector acc = Vector::Zero(mu.dim());
      for (const auto& xj : mu.tokens) {
        const double s = ax.dot(xj);
        double w = 0.0;
        if (params.variant == Variant::Exp) w = std::exp(s);
        else if (params.variant == Variant::ReLU) w = std::max(s, 0.0);
        else w = sigmoid(s);
        acc += w * xj;
      }
      return params.V * (acc / mu.size());
    }
    case Variant::Sinkhorn: {
      if (kernel == nullptr)
        fail(Errc::MissingKernel, "sinkhorn velocity needs a converged kernel");
      const Vector row = kernel_row_at(*kernel, mu, params, x);
      Vector acc = Vector::Zero(mu.dim());
      for (int j = 0; j < mu.size(); ++j) acc += row(j) * mu.tokens[j];
      return params.V * acc / (params.eps * mu.size());
    }
    case Variant::MultiHead: {
      Vector acc = Vector::Zero(mu.dim());
      for (const auto& h : params.heads)
        acc += softmax_point(h.K.transpose() * h.Q, h.V, mu.tokens, x);
      return acc;
    }
    case Variant::Masked:
      fail(Errc::UnsupportedVariant, "use velocity_masked for the masked variant");
  }
  fail(Errc::UnsupportedVariant, "unknown variant");
}

std::pair<double, Vector> velocity_masked(const AttentionParams& params,
                                          const EmpiricalMeasure& mu_bar, double sigma,
                                          const Vector& x) {
  if (!mu_bar.positions) fail(Errc::InvalidArgument, "masked velocity needs positions");
  std::vector<Vector> visible;
  for (int j = 0; j < mu_bar.size(); ++j)
    if ((*mu_bar.positions)[j] <= sigma) visible.push_back(mu_bar.tokens[j]);
  if (visible.empty()) fail(Errc::EmptyMask, "no token has position <= sigma");

  AttentionParams inner = params;
  inner.variant = params.variant == Variant::Masked ? params.masked_inner : params.variant;
  const EmpiricalMeasure sub(std::move(visible));
  Vector v;
  if (inner.variant == Variant::Sinkhorn) {
    const DiscreteKernel k = sinkhorn_kernel_discrete(sub, inner);
    v = velocity_discrete(inner, sub, x, &k);
  } else {
    v = velocity_discrete(inner, sub, x);
  }
  return {0.0, std::move(v)};
}

namespace detail {

Matrix tokens_to_matrix(const std::vector<Vector>& tokens) {
  Matrix X(tokens.size(), tokens.front().size());
  for (std::size_t i = 0; i < tokens.size(); ++i) X.row(i) = tokens[i].transpose();
  return X;
}

std::vector<Vector> matrix_to_tokens(const Matrix& X) {
  std::vector<Vector> tokens(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) tokens[i] = X.row(i).transpose();
  return tokens;
}

namespace {

// Column i of scores holds the query-i weights over tokens j (contiguous in
// the default column-major layout, so the softmax and the exp vectorize).
// Returns Gamma rows: P^T X V^T with P the column-normalized soft weights.
Matrix normalized_batch_cols(Matrix scores, const Matrix& X, const Matrix& V) {
  const Eigen::RowVectorXd mx = scores.colwise().maxCoeff();
  scores.rowwise() -= mx;
  scores = scores.array().exp();
  const Eigen::RowVectorXd sums = scores.colwise().sum();
  scores.array().rowwise() /= sums.array();
  return scores.transpose() * X * V.transpose();
}

Matrix softmax_batch(const Matrix& A, const Matrix& V, const Matrix& X) {
  // (X A X^T)_{j,i} = (A x_i) . x_j
  return normalized_batch_cols(X * A * X.transpose(), X, V);
}

Matrix l2_scores_cols(const AttentionParams& p, const Matrix& X) {
  const Matrix QX = X * p.Q.transpose();
  const Matrix KX = X * p.K.transpose();
  const Vector qn = QX.rowwise().squaredNorm();
  const Vector kn = KX.rowwise().squaredNorm();
  Matrix s = 2.0 * KX * QX.transpose();  // (j, i) entry: 2 (K x_j) . (Q x_i)
  s.colwise() -= kn;
  s.rowwise() -= qn.transpose();
  return s;  // (j, i) entry: -|Q x_i - K x_j|^2
}

}  // namespace

Matrix velocity_batch(const AttentionParams& params, const Matrix& X) {
  const int d = static_cast<int>(X.cols());
  params.validate(d);
  switch (params.variant) {
    case Variant::Softmax:
      return softmax_batch(params.A(), params.V, X);
    case Variant::Linear: {
      const Matrix s2 = X.transpose() * X / static_cast<double>(X.rows());
      return X * params.A().transpose() * s2 * params.V.transpose();
    }
    case Variant::LinearEps: {
      const Vector m = X.colwise().mean().transpose();
      const Matrix cov = X.transpose() * X / static_cast<double>(X.rows()) - m * m.transpose();
      Matrix out = X * params.A().transpose() * cov * params.V.transpose();
      out.rowwise() += (params.V * m / params.eps).transpose();
      return out;
    }
    case Variant::L2:
      return normalized_batch_cols(l2_scores_cols(params, X), X, params.V);
    case Variant::Exp:
    case Variant::ReLU:
    case Variant::Sigmoid: {
      Matrix w = X * params.A().transpose() * X.transpose();
      if (params.variant == Variant::Exp) w = w.array().exp();
      else if (params.variant == Variant::ReLU) w = w.cwiseMax(0.0);
      else w = w.unaryExpr([](double z) { return sigmoid(z); });
      return w * X * params.V.transpose() / static_cast<double>(X.rows());
    }
    case Variant::Sinkhorn: {
      const EmpiricalMeasure mu(matrix_to_tokens(X));
      const DiscreteKernel k = sinkhorn_kernel_discrete(mu, params);
      Matrix out(X.rows(), X.cols());
      for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const Vector row = kernel_row_at(k, mu, params, X.row(i).transpose());
        out.row(i) = (row.transpose() * X) / (params.eps * X.rows());
      }
      return out * params.V.transpose();
    }
    case Variant::MultiHead: {
      Matrix acc = Matrix::Zero(X.rows(), X.cols());
      for (const auto& h : params.heads) acc += softmax_batch(h.K.transpose() * h.Q, h.V, X);
      return acc;
    }
    case Variant::Masked:
      fail(Errc::UnsupportedVariant, "masked batch needs positions");
  }
  fail(Errc::UnsupportedVariant, "unknown variant");
}

Matrix velocity_batch_masked(const AttentionParams& params, const Matrix& X,
                             const std::vector<double>& positions) {
  EmpiricalMeasure mu_bar(matrix_to_tokens(X), positions);
  Matrix out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    out.row(i) = velocity_masked(params, mu_bar, positions[i], X.row(i).transpose())
                     .second.transpose();
  return out;
}

Matrix sinkhorn_gaussian_c(const Matrix& sigma, const Matrix& A, double eps,
                           bool inner_at_sigma_a) {
  const int d = static_cast<int>(sigma.rows());
  SymEig e = sym_eig(sigma);
  if (!(e.eigenvalues(d - 1) > 0.0))
    fail(Errc::SingularSigma, "sinkhorn Gaussian field needs Sigma SPD");
  const Matrix shalf =
      e.eigenvectors * e.eigenvalues.cwiseSqrt().asDiagonal() * e.eigenvectors.transpose();
  const Matrix shalf_inv = e.eigenvectors * e.eigenvalues.cwiseSqrt().cwiseInverse().asDiagonal() *
                           e.eigenvectors.transpose();
  const Matrix core = inner_at_sigma_a ? Matrix(A.transpose() * sigma * A)
                                       : Matrix(A * sigma * A.transpose());
  Matrix inner = shalf * core * shalf;
  inner = 0.5 * (inner + inner.transpose());
  inner.diagonal().array() += eps * eps / 4.0;
  return shalf * psd_sqrt(inner) * shalf_inv - (eps / 2.0) * Matrix::Identity(d, d);
}

AffineField gaussian_field(const AttentionParams& params, const Vector& alpha,
                           const Matrix& sigma) {
  const int d = static_cast<int>(alpha.size());
  switch (params.variant) {
    case Variant::Softmax:
      return {params.V * sigma * params.A(), params.V * alpha};
    case Variant::Linear:
      return {params.V * (sigma + alpha * alpha.transpose()) * params.A(), Vector::Zero(d)};
    case Variant::LinearEps:
      return {params.V * sigma * params.A(), params.V * alpha / params.eps};
    case Variant::L2: {
      // (Sigma^-1 + 2 K^T K)^-1 = Sigma (I + 2 K^T K Sigma)^-1, inverse-free in Sigma
      const Matrix ktk2 = 2.0 * params.K.transpose() * params.K;
      const Matrix w = (Matrix::Identity(d, d) + ktk2 * sigma).partialPivLu().inverse();
      return {2.0 * params.V * sigma * w * params.A(),
              params.V * (Matrix::Identity(d, d) + sigma * ktk2).partialPivLu().solve(alpha)};
    }
    case Variant::Sinkhorn: {
      const Matrix A = params.A();
      SymEig ea = sym_eig(Matrix(A.transpose() * A));
      if (!(ea.eigenvalues(d - 1) > 0.0) ||
          std::sqrt(ea.eigenvalues(0) / ea.eigenvalues(d - 1)) >= 1e10)
        fail(Errc::SingularA, "sinkhorn Gaussian field needs A invertible");
      const Matrix c = sinkhorn_gaussian_c(sigma, A, params.eps, true);
      const Matrix t = A.transpose().partialPivLu().solve(Matrix(inverse_spd(sigma) * c));
      return {params.V * t / params.eps, params.V * (alpha - t * alpha) / params.eps};
    }
    case Variant::MultiHead: {
      Matrix m = Matrix::Zero(d, d);
      Vector b = Vector::Zero(d);
      for (const auto& h : params.heads) {
        m += h.V * sigma * (h.K.transpose() * h.Q);
        b += h.V * alpha;
      }
      return {std::move(m), std::move(b)};
    }
    default:
      fail(Errc::UnsupportedVariant,
           std::string(variant_name(params.variant)) + " has no Gaussian closed form");
  }
}

}  // namespace detail

AffineField velocity_gaussian(const AttentionParams& params, const GaussianMeasure& g) {
  params.validate(g.dim());
  if (params.variant == Variant::L2 || params.variant == Variant::Sinkhorn) {
    SymEig e = sym_eig(g.sigma);
    if (!(e.eigenvalues(g.dim() - 1) > 1e-14 * std::max(e.eigenvalues(0), 0.0)) ||
        !(e.eigenvalues(g.dim() - 1) > 0.0))
      fail(Errc::SingularSigma,
           std::string(variant_name(params.variant)) + " Gaussian field needs Sigma SPD");
  }
  return detail::gaussian_field(params, g.alpha, g.sigma);
}

}  // namespace attnflow
