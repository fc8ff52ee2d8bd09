#pragma once

#include <string>
#include <vector>

#include "attnflow/types.hpp"

namespace attnflow {

/// (1/2n^2) sum_{i,j} exp((A x_i) . x_j). Throws Overflow if any exponent
/// exceeds 700.
double interaction_energy_discrete(const EmpiricalMeasure& mu, const Matrix& A);

/// Closed form of (1/2) E exp((A x) . y) on N(alpha, Sigma):
/// exp((1/2) a^T ((A + S^-1)^T (S^-1 - A S A^T)^-1 (A + S^-1) - S^-1) a)
///   / (2 |det(I - A S A^T S)|^{1/2}).
double softmax_energy_gaussian(const GaussianMeasure& g, const Matrix& A);

/// Gaussian restriction of the Sinkformer energy:
/// (1/4eps) (-B_eps^2(S, S) + tr(Q S Q^T) + tr(K S K^T) + a^T (Q^T Q + K^T K) a).
double sink_energy_gaussian(const GaussianMeasure& g, const Matrix& Q, const Matrix& K,
                            double eps);

enum class EnergyKind { SoftmaxGaussian, SinkGaussian, InteractionDiscrete };

struct MonotonicityReport {
  std::vector<double> times;
  std::vector<double> energies;
  double max_increment = 0.0;           // largest positive energy step
  double max_relative_increment = 0.0;  // against 1 + |energy|
  bool passes = false;                  // increments <= 1e-6 * (1 + |energy|)
  bool condition_satisfied = false;     // gradient-flow parameter condition
  std::string condition_note;
};

/// Per-step energy values along a trajectory; a diagnostic, never an error.
/// Checks the gradient-flow parameter condition (A = A^T = -V for the
/// Sinkhorn energy, B = -V A^{-T} symmetric positive definite for the
/// Softmax/interaction energies) and records violations as a warning note.
MonotonicityReport energy_monotonicity_report(const Trajectory& trajectory, EnergyKind kind,
                                              const AttentionParams& params);

}  // namespace attnflow
