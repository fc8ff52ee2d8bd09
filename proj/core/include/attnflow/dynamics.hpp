#pragma once

#include "attnflow/attention.hpp"
#include "attnflow/types.hpp"

namespace attnflow {

struct SolverConfig {
  enum class Method { Euler, RK4 };

  Method method = Method::RK4;
  double dt = 1e-3;
  double t_end = 1.0;
  double blowup_threshold = 1e8;
  int record_every = 1;

  void validate() const;
};

/// Token dynamics dx_i/dt = Gamma_{X(t)}(x_i). Measures with positions evolve
/// under the masked field (positions stay frozen). Sinkhorn rebuilds its
/// kernel at every stage evaluation; a kernel that fails to converge ends the
/// trajectory with NumericalFailure.
Trajectory integrate_particles(const ParameterSchedule& schedule, const EmpiricalMeasure& x0,
                               const SolverConfig& cfg);

/// Gaussian moment ODEs d(alpha)/dt = M alpha + b, d(Sigma)/dt = M Sigma + Sigma M^T
/// with (M, b) the closed-form field of the current (alpha, Sigma). Sigma is
/// re-symmetrized after every step.
Trajectory integrate_moments(const ParameterSchedule& schedule, const GaussianMeasure& g0,
                             const SolverConfig& cfg);

struct CommutingResult {
  bool blow_up = false;
  Matrix sigma;  // valid iff !blow_up
};

/// Sigma(t) = (Sigma0^-1 - t (V A + A^T V^T))^-1, valid when V commutes with
/// Sigma0 and with V A + A^T V^T (checked within commutator norm 1e-8).
CommutingResult closed_form_commuting(const Matrix& sigma0, const Matrix& A, const Matrix& V,
                                      double t);

struct Dim1Result {
  bool blow_up = false;
  double value = 0.0;
  double t_max = std::numeric_limits<double>::infinity();  // Softmax blow-up time if av > 0
};

/// One-dimensional covariance solutions: Softmax by the exact rational formula,
/// L2 and Sinkhorn by a dt = 1e-5 RK4 reference integration.
Dim1Result closed_form_dim1(Variant variant, double a, double v, double s0, double t,
                            double k = 1.0, double eps = 1.0);

/// Rank-1 factor flow du/dt = (u^T A u) V u; the induced Sigma = u u^T solves
/// the Softmax covariance ODE.
Trajectory rank1_flow(const Vector& u0, const Matrix& A, const Matrix& V, const SolverConfig& cfg);

/// Stationary-rank bound dim ker A + min(#positive, #negative eigenvalues) for
/// symmetric A (the V = I case).
int predict_stationary_rank_bound(const Matrix& A);

/// R(t) = exp(int_0^t ||V(s)||_2 ds) R0, exact for piecewise-constant schedules.
double support_radius_bound(double r0, const ParameterSchedule& schedule, double t);

}  // namespace attnflow
