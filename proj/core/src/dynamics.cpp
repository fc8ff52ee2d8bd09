#include "attnflow/dynamics.hpp"

#include <cmath>
#include <functional>

namespace attnflow {

void SolverConfig::validate() const {
  if (!(dt > 0.0)) fail(Errc::InvalidArgument, "dt must be positive");
  if (!(t_end > 0.0) || !(dt < t_end)) fail(Errc::InvalidArgument, "need 0 < dt < t_end");
  if (!(blowup_threshold > 1.0)) fail(Errc::InvalidArgument, "blowup_threshold must exceed 1");
  if (record_every < 1) fail(Errc::InvalidArgument, "record_every must be >= 1");
}

namespace {

int step_count(const SolverConfig& cfg) {
  return static_cast<int>(std::llround(cfg.t_end / cfg.dt));
}

// Generic fixed-step driver over an arbitrary state with vector-space ops
// provided by Eigen matrices. Events: finite threshold crossing -> BlowUp;
// non-finite values -> NumericalFailure. t* is the midpoint of the last stable
// and first unstable step.
template <class Rhs, class Record, class Norm>
TerminationStatus drive(const SolverConfig& cfg, Matrix& y, Rhs rhs, Norm state_norm,
                        Record record) {
  const int nsteps = std::max(step_count(cfg), 1);
  record(0.0, y);
  Matrix k1, k2, k3, k4;
  for (int step = 0; step < nsteps; ++step) {
    const double t = step * cfg.dt;
    Matrix y_next;
    bool ok = true;
    try {
      if (cfg.method == SolverConfig::Method::Euler) {
        k1 = rhs(t, y);
        y_next = y + cfg.dt * k1;
      } else {
        k1 = rhs(t, y);
        k2 = rhs(t + 0.5 * cfg.dt, Matrix(y + 0.5 * cfg.dt * k1));
        k3 = rhs(t + 0.5 * cfg.dt, Matrix(y + 0.5 * cfg.dt * k2));
        k4 = rhs(t + cfg.dt, Matrix(y + cfg.dt * k3));
        y_next = y + (cfg.dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
    } catch (const Error& e) {
      if (e.code() == Errc::NotConverged) ok = false;  // stale-kernel abort
      else throw;
    }
    const double t_next = (step + 1) * cfg.dt;
    const double t_mid = 0.5 * (t + t_next);
    if (!ok || !y_next.allFinite()) {
      return {Termination::NumericalFailure, t_mid};
    }
    if (state_norm(y_next) > cfg.blowup_threshold) {
      y = y_next;
      record(t_next, y);  // last recorded state exceeds the threshold
      return {Termination::BlowUp, t_mid};
    }
    y = y_next;
    if ((step + 1) % cfg.record_every == 0 || step + 1 == nsteps) record(t_next, y);
  }
  return {Termination::Completed, 0.0};
}

double max_row_norm(const Matrix& x) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) m = std::max(m, x.row(i).norm());
  return m;
}

}  // namespace

Trajectory integrate_particles(const ParameterSchedule& schedule, const EmpiricalMeasure& x0,
                               const SolverConfig& cfg) {
  cfg.validate();
  const bool masked = x0.positions.has_value();
  schedule.at(0.0).validate(x0.dim());
  if (schedule.at(0.0).variant == Variant::Masked && !masked)
    fail(Errc::InvalidArgument, "masked dynamics need token positions");

  Matrix X = detail::tokens_to_matrix(x0.tokens);
  Trajectory traj;
  auto record = [&](double t, const Matrix& y) {
    traj.times.push_back(t);
    ParticleState st{detail::matrix_to_tokens(y)};
    traj.states.push_back(std::move(st));
  };
  auto rhs = [&](double t, const Matrix& y) -> Matrix {
    const AttentionParams& p = schedule.at(t);
    return masked ? detail::velocity_batch_masked(p, y, *x0.positions)
                  : detail::velocity_batch(p, y);
  };
  traj.status = drive(cfg, X, rhs, max_row_norm, record);
  return traj;
}

namespace {

// state layout for moment integration: d x (d+1) matrix [Sigma | alpha]
Matrix pack_moments(const Vector& alpha, const Matrix& sigma) {
  Matrix y(sigma.rows(), sigma.cols() + 1);
  y.leftCols(sigma.cols()) = sigma;
  y.col(sigma.cols()) = alpha;
  return y;
}

}  // namespace

Trajectory integrate_moments(const ParameterSchedule& schedule, const GaussianMeasure& g0,
                             const SolverConfig& cfg) {
  cfg.validate();
  const int d = g0.dim();
  schedule.at(0.0).validate(d);
  const Variant v0 = schedule.at(0.0).variant;
  if (v0 != Variant::Softmax && v0 != Variant::Linear && v0 != Variant::LinearEps &&
      v0 != Variant::L2 && v0 != Variant::Sinkhorn && v0 != Variant::MultiHead)
    fail(Errc::UnsupportedVariant,
         std::string(variant_name(v0)) + " does not preserve Gaussian measures");
  // Only the Sinkhorn field evaluates Sigma^-1 while stepping; the L2 field is
  // computed in an inverse-free form that extends continuously to singular
  // covariances, and its flow routinely collapses eigenvalues past any
  // relative floor on long horizons.
  const bool needs_spd = v0 == Variant::Sinkhorn;

  Matrix y = pack_moments(g0.alpha, g0.sigma);
  Trajectory traj;
  auto record = [&](double t, const Matrix& st) {
    traj.times.push_back(t);
    traj.states.push_back(MomentState{st.col(d), st.leftCols(d)});
  };
  auto rhs = [&](double t, const Matrix& st) -> Matrix {
    const AttentionParams& p = schedule.at(t);
    const Vector alpha = st.col(d);
    Matrix sigma = st.leftCols(d);
    sigma = 0.5 * (sigma + sigma.transpose());
    AffineField field = detail::gaussian_field(p, alpha, sigma);
    Matrix dy(d, d + 1);
    dy.leftCols(d).noalias() = field.M * sigma;
    dy.leftCols(d) += dy.leftCols(d).transpose().eval();
    dy.col(d).noalias() = field.M * alpha;
    dy.col(d) += field.b;
    return dy;
  };
  auto step_hook = [&](Matrix& st) {
    // re-symmetrize after each full step; floating-point drift is not
    // preserved by the ODE structure
    Matrix sigma = st.leftCols(d);
    st.leftCols(d) = 0.5 * (sigma + sigma.transpose());
    if (needs_spd) {
      SymEig e = sym_eig(Matrix(st.leftCols(d)));
      if (!(e.eigenvalues(d - 1) > 1e-14 * std::max(e.eigenvalues(0), 0.0)))
        fail(Errc::SingularSigma, "covariance became numerically singular while stepping");
    }
  };

  // wrap drive() with the per-step hook via a recording shim
  const int nsteps = std::max(step_count(cfg), 1);
  record(0.0, y);
  Matrix k1, k2, k3, k4;
  for (int step = 0; step < nsteps; ++step) {
    const double t = step * cfg.dt;
    Matrix y_next;
    bool numerical_ok = true;
    try {
      if (cfg.method == SolverConfig::Method::Euler) {
        y_next = y + cfg.dt * rhs(t, y);
      } else {
        k1 = rhs(t, y);
        k2 = rhs(t + 0.5 * cfg.dt, Matrix(y + 0.5 * cfg.dt * k1));
        k3 = rhs(t + 0.5 * cfg.dt, Matrix(y + 0.5 * cfg.dt * k2));
        k4 = rhs(t + cfg.dt, Matrix(y + cfg.dt * k3));
        y_next = y + (cfg.dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
    } catch (const Error& e) {
      if (e.code() == Errc::NotConverged) numerical_ok = false;
      else throw;
    }
    const double t_next = (step + 1) * cfg.dt;
    const double t_mid = 0.5 * (t + t_next);
    if (!numerical_ok || !y_next.allFinite()) {
      traj.status = {Termination::NumericalFailure, t_mid};
      return traj;
    }
    if (y_next.leftCols(d).norm() > cfg.blowup_threshold) {
      y = y_next;
      record(t_next, y);
      traj.status = {Termination::BlowUp, t_mid};
      return traj;
    }
    y = y_next;
    step_hook(y);
    if ((step + 1) % cfg.record_every == 0 || step + 1 == nsteps) record(t_next, y);
  }
  traj.status = {Termination::Completed, 0.0};
  return traj;
}

CommutingResult closed_form_commuting(const Matrix& sigma0, const Matrix& A, const Matrix& V,
                                      double t) {
  const int d = static_cast<int>(sigma0.rows());
  const Matrix w = V * A + A.transpose() * V.transpose();
  auto commutes = [](const Matrix& x, const Matrix& y) {
    return (x * y - y * x).norm() <= 1e-8 * (1.0 + x.norm() * y.norm());
  };
  if (!commutes(V, sigma0) || !commutes(V, w))
    fail(Errc::CommutationViolated, "V must commute with Sigma0 and with V A + A^T V^T");

  const Matrix omega = inverse_spd(sigma0) - t * w;
  SymEig e = sym_eig(Matrix(0.5 * (omega + omega.transpose())));
  if (!(e.eigenvalues(d - 1) > 0.0)) return {true, Matrix()};
  return {false, e.eigenvectors * e.eigenvalues.cwiseInverse().asDiagonal() *
                     e.eigenvectors.transpose()};
}

Dim1Result closed_form_dim1(Variant variant, double a, double v, double s0, double t, double k,
                            double eps) {
  if (!(s0 > 0.0)) fail(Errc::InvalidArgument, "s0 must be positive");
  if (!(t >= 0.0)) fail(Errc::InvalidArgument, "t must be nonnegative");
  switch (variant) {
    case Variant::Softmax: {
      Dim1Result r;
      if (a * v > 0.0) {
        r.t_max = 1.0 / (2.0 * v * a * s0);
        if (t >= r.t_max) {
          r.blow_up = true;
          return r;
        }
      }
      r.value = 1.0 / (1.0 / s0 - 2.0 * v * a * t);
      return r;
    }
    case Variant::L2:
    case Variant::Sinkhorn: {
      auto rhs = [&](double s) {
        if (variant == Variant::L2) return 4.0 * a * v * s * s / (1.0 + 2.0 * k * k * s);
        const double z = 2.0 * a * s / eps;
        return (v / a) * (std::sqrt(z * z + 1.0) - 1.0);
      };
      const double dt = 1e-5;
      const auto nsteps = static_cast<long long>(std::ceil(t / dt - 1e-9));
      double s = s0;
      for (long long i = 0; i < nsteps; ++i) {
        const double h = std::min(dt, t - static_cast<double>(i) * dt);
        const double k1 = rhs(s);
        const double k2 = rhs(s + 0.5 * h * k1);
        const double k3 = rhs(s + 0.5 * h * k2);
        const double k4 = rhs(s + h * k3);
        s += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
      return {false, s, std::numeric_limits<double>::infinity()};
    }
    default:
      fail(Errc::UnsupportedVariant, "closed_form_dim1 covers softmax, l2, sinkhorn");
  }
}

Trajectory rank1_flow(const Vector& u0, const Matrix& A, const Matrix& V,
                      const SolverConfig& cfg) {
  cfg.validate();
  if (!(u0.norm() > 0.0)) fail(Errc::InvalidArgument, "u0 must be nonzero");
  Matrix y = u0.transpose();
  Trajectory traj;
  auto record = [&](double t, const Matrix& st) {
    traj.times.push_back(t);
    traj.states.push_back(ParticleState{{Vector(st.row(0).transpose())}});
  };
  auto rhs = [&](double, const Matrix& st) -> Matrix {
    const Vector u = st.row(0).transpose();
    return Matrix((u.dot(A * u) * (V * u)).transpose());
  };
  // Sigma = u u^T, so compare ||u||^2 against the threshold
  auto norm2 = [](const Matrix& st) { return st.row(0).squaredNorm(); };
  traj.status = drive(cfg, y, rhs, norm2, record);
  return traj;
}

int predict_stationary_rank_bound(const Matrix& A) {
  if (!is_symmetric(A)) fail(Errc::NotSymmetric, "A must be symmetric within 1e-10");
  SymEig e = sym_eig(A);
  const double scale = e.eigenvalues.cwiseAbs().maxCoeff();
  const double cutoff = 1e-6 * std::max(scale, 1e-300);
  int pos = 0, neg = 0, ker = 0;
  for (int i = 0; i < e.eigenvalues.size(); ++i) {
    if (e.eigenvalues(i) > cutoff) ++pos;
    else if (e.eigenvalues(i) < -cutoff) ++neg;
    else ++ker;
  }
  return ker + std::min(pos, neg);
}

double support_radius_bound(double r0, const ParameterSchedule& schedule, double t) {
  if (!(r0 > 0.0)) fail(Errc::InvalidArgument, "R0 must be positive");
  if (!(t >= 0.0)) fail(Errc::InvalidArgument, "t must be nonnegative");
  const auto& pieces = schedule.pieces();
  double integral = 0.0;
  for (std::size_t k = 0; k < pieces.size(); ++k) {
    const double seg_start = pieces[k].first;
    if (seg_start >= t) break;
    const double seg_end = k + 1 < pieces.size() ? std::min(pieces[k + 1].first, t) : t;
    const auto& p = pieces[k].second;
    double vnorm = 0.0;
    if (p.variant == Variant::MultiHead) {
      // the multi-head field is a sum of head fields, so the bound adds up
      for (const auto& h : p.heads) vnorm += spectral_norm(h.V);
    } else {
      vnorm = spectral_norm(p.V);
    }
    integral += vnorm * (seg_end - seg_start);
  }
  return std::exp(integral) * r0;
}

}  // namespace attnflow
