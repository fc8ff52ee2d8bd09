#pragma once

#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "attnflow/linalg.hpp"

namespace attnflow {

/// n tokens in R^d with uniform weights 1/n. Positions in [0,1] are present iff
/// the measure is the lifted input of masked attention.
struct EmpiricalMeasure {
  std::vector<Vector> tokens;
  std::optional<std::vector<double>> positions;

  EmpiricalMeasure() = default;
  explicit EmpiricalMeasure(std::vector<Vector> toks,
                            std::optional<std::vector<double>> pos = std::nullopt);

  int size() const { return static_cast<int>(tokens.size()); }
  int dim() const { return static_cast<int>(tokens.front().size()); }

  Vector mean() const;
  Matrix covariance() const;     // (1/n) sum (x_i - m)(x_i - m)^T
  Matrix second_moment() const;  // (1/n) sum x_i x_i^T
  EmpiricalMeasure space_marginal() const;
};

struct GaussianMeasure {
  Vector alpha;
  Matrix sigma;

  GaussianMeasure(Vector mean, Matrix covariance);
  int dim() const { return static_cast<int>(alpha.size()); }
};

enum class Variant {
  Softmax,
  Linear,
  LinearEps,
  L2,
  Sinkhorn,
  Sigmoid,
  ReLU,
  Exp,
  MultiHead,
  Masked,
};

const char* variant_name(Variant v) noexcept;

struct AttentionHead {
  Matrix Q, K, V;
};

struct AttentionParams {
  Variant variant = Variant::Softmax;
  Matrix Q, K, V;
  double eps = 1.0;                         // Sinkhorn / LinearEps only
  std::vector<AttentionHead> heads;         // MultiHead only
  Variant masked_inner = Variant::Softmax;  // Masked only

  Matrix A() const { return K.transpose() * Q; }

  /// Checks shape invariants against token dimension d. Throws on violation.
  void validate(int d) const;

  static AttentionParams softmax(Matrix Q, Matrix K, Matrix V);
  /// Softmax parametrized directly by A = K^T Q (sets K = I, Q = A).
  static AttentionParams softmax_a(const Matrix& A, Matrix V);
  static AttentionParams linear(Matrix Q, Matrix K, Matrix V);
  static AttentionParams linear_eps(Matrix Q, Matrix K, Matrix V, double eps);
  static AttentionParams l2(Matrix Q, Matrix K, Matrix V);
  static AttentionParams sinkhorn(Matrix Q, Matrix K, Matrix V, double eps);
  static AttentionParams unnormalized(Variant v, Matrix Q, Matrix K, Matrix V);
  static AttentionParams multi_head(std::vector<AttentionHead> heads);
  static AttentionParams masked(AttentionParams inner);
};

/// Piecewise-constant in time; breakpoints strictly increasing, starting at 0.
class ParameterSchedule {
public:
  explicit ParameterSchedule(AttentionParams constant);
  explicit ParameterSchedule(std::vector<std::pair<double, AttentionParams>> pieces);

  const AttentionParams& at(double t) const;
  const std::vector<std::pair<double, AttentionParams>>& pieces() const { return pieces_; }
  bool constant() const { return pieces_.size() == 1; }

private:
  std::vector<std::pair<double, AttentionParams>> pieces_;
};

/// Gaussian-closed-form velocity Gamma(x) = M x + b.
struct AffineField {
  Matrix M;
  Vector b;

  Vector operator()(const Vector& x) const { return M * x + b; }
};

struct ParticleState {
  std::vector<Vector> tokens;
};

struct MomentState {
  Vector alpha;
  Matrix sigma;
};

using State = std::variant<ParticleState, MomentState>;

enum class Termination { Completed, BlowUp, NumericalFailure };

struct TerminationStatus {
  Termination kind = Termination::Completed;
  double t = 0.0;  // event time for BlowUp / NumericalFailure
};

struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
  TerminationStatus status;

  const ParticleState& particles(std::size_t i) const { return std::get<ParticleState>(states[i]); }
  const MomentState& moments(std::size_t i) const { return std::get<MomentState>(states[i]); }
  bool holds_moments() const;
  bool completed() const { return status.kind == Termination::Completed; }
};

}  // namespace attnflow
