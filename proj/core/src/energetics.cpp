#include "attnflow/energetics.hpp"

#include <Eigen/LU>
#include <cmath>

#include "attnflow/transport.hpp"

namespace attnflow {

double interaction_energy_discrete(const EmpiricalMeasure& mu, const Matrix& A) {
  const int n = mu.size();
  if (A.rows() != mu.dim() || A.cols() != mu.dim())
    fail(Errc::DimensionMismatch, "A must be d x d");
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector ax = A * mu.tokens[i];
    for (int j = 0; j < n; ++j) {
      const double e = ax.dot(mu.tokens[j]);
      if (e > 700.0) fail(Errc::Overflow, "interaction energy exponent exceeds 700");
      acc += std::exp(e);
    }
  }
  return acc / (2.0 * static_cast<double>(n) * n);
}

double softmax_energy_gaussian(const GaussianMeasure& g, const Matrix& A) {
  const int d = g.dim();
  if (A.rows() != d || A.cols() != d) fail(Errc::DimensionMismatch, "A must be d x d");
  SymEig es = sym_eig(g.sigma);
  if (!(es.eigenvalues(d - 1) > 0.0)) fail(Errc::OutOfDomain, "Sigma must be SPD");

  const Matrix id = Matrix::Identity(d, d);
  const double det = (id - A * g.sigma * A.transpose() * g.sigma).partialPivLu().determinant();
  if (std::abs(det) < 1e-10) fail(Errc::OutOfDomain, "det(I - A S A^T S) within 1e-10 of zero");

  const Matrix sigma_inv = inverse_spd(g.sigma);
  Matrix inner = sigma_inv - A * g.sigma * A.transpose();
  inner = 0.5 * (inner + inner.transpose());
  SymEig ei = sym_eig(inner);
  const double scale = ei.eigenvalues.cwiseAbs().maxCoeff();
  if (ei.eigenvalues.cwiseAbs().minCoeff() <= 1e-12 * std::max(scale, 1e-300))
    fail(Errc::OutOfDomain, "S^-1 - A S A^T is numerically singular");
  const Matrix inner_inv =
      ei.eigenvectors * ei.eigenvalues.cwiseInverse().asDiagonal() * ei.eigenvectors.transpose();

  const Matrix m = A + sigma_inv;
  const double expo =
      0.5 * g.alpha.dot((m.transpose() * inner_inv * m - sigma_inv) * g.alpha);
  return std::exp(expo) / (2.0 * std::sqrt(std::abs(det)));
}

double sink_energy_gaussian(const GaussianMeasure& g, const Matrix& Q, const Matrix& K,
                            double eps) {
  const double bures = entropic_bures(g.sigma, g.sigma, Q, K, eps);
  const double traces =
      (Q * g.sigma * Q.transpose()).trace() + (K * g.sigma * K.transpose()).trace();
  const double quad = g.alpha.dot((Q.transpose() * Q + K.transpose() * K) * g.alpha);
  return (-bures + traces + quad) / (4.0 * eps);
}

namespace {

std::pair<bool, std::string> gradient_flow_condition(EnergyKind kind,
                                                     const AttentionParams& params) {
  const Matrix A = params.A();
  const double scale = 1.0 + A.norm() + params.V.norm();
  if (kind == EnergyKind::SinkGaussian) {
    const bool sym = (A - A.transpose()).norm() <= 1e-8 * scale;
    const bool neg_v = (A + params.V).norm() <= 1e-8 * scale;
    if (sym && neg_v) return {true, ""};
    return {false, "gradient-flow condition A = A^T = -V not satisfied"};
  }
  // twisted flow: B = -V A^{-T} symmetric positive definite
  Eigen::PartialPivLU<Matrix> lu(Matrix(A.transpose()));
  if (std::abs(lu.determinant()) < 1e-12 * std::max(1.0, std::pow(A.norm(), A.rows())))
    return {false, "A is singular, B = -V A^{-T} undefined"};
  const Matrix B = -params.V * lu.inverse();
  if ((B - B.transpose()).norm() > 1e-8 * (1.0 + B.norm()))
    return {false, "B = -V A^{-T} is not symmetric"};
  SymEig e = sym_eig(Matrix(0.5 * (B + B.transpose())));
  if (!(e.eigenvalues(e.eigenvalues.size() - 1) > 0.0))
    return {false, "B = -V A^{-T} is not positive definite"};
  return {true, ""};
}

}  // namespace

MonotonicityReport energy_monotonicity_report(const Trajectory& trajectory, EnergyKind kind,
                                              const AttentionParams& params) {
  MonotonicityReport rep;
  auto cond = gradient_flow_condition(kind, params);
  rep.condition_satisfied = cond.first;
  rep.condition_note = cond.second;

  for (std::size_t i = 0; i < trajectory.states.size(); ++i) {
    double e = std::numeric_limits<double>::quiet_NaN();
    try {
      if (kind == EnergyKind::InteractionDiscrete) {
        const auto& st = std::get<ParticleState>(trajectory.states[i]);
        e = interaction_energy_discrete(EmpiricalMeasure(st.tokens), params.A());
      } else {
        const auto& st = std::get<MomentState>(trajectory.states[i]);
        const GaussianMeasure g(st.alpha, Matrix(0.5 * (st.sigma + st.sigma.transpose())));
        e = kind == EnergyKind::SoftmaxGaussian
                ? softmax_energy_gaussian(g, params.A())
                : sink_energy_gaussian(g, params.Q, params.K, params.eps);
      }
    } catch (const Error& err) {
      if (rep.condition_note.empty())
        rep.condition_note = std::string("energy undefined at some steps (") + err.what() + ")";
    } catch (const std::bad_variant_access&) {
      fail(Errc::InvalidArgument, "trajectory state kind does not match the energy kind");
    }
    rep.times.push_back(trajectory.times[i]);
    rep.energies.push_back(e);
  }

  bool ok = true;
  for (std::size_t i = 1; i < rep.energies.size(); ++i) {
    const double prev = rep.energies[i - 1];
    const double cur = rep.energies[i];
    if (!std::isfinite(prev) || !std::isfinite(cur)) continue;
    const double inc = cur - prev;
    if (inc > rep.max_increment) rep.max_increment = inc;
    const double rel = inc / (1.0 + std::abs(prev));
    if (rel > rep.max_relative_increment) rep.max_relative_increment = rel;
    if (inc > 1e-6 * (1.0 + std::abs(prev))) ok = false;
  }
  rep.passes = ok;
  return rep;
}

}  // namespace attnflow
