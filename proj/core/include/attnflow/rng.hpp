#pragma once

#include <cstdint>

#include "attnflow/linalg.hpp"

namespace attnflow {

/// Counter-based PRNG: splitmix64 over a (seed, stream) derived state, with
/// Box-Muller normals. Self-contained so that identical seeds give identical
/// streams on every platform ("attnflow-splitmix64-v1" in run manifests).
class CounterRng {
public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  double next_double();    // uniform in [0, 1)
  double next_gaussian();  // standard normal

  Vector gaussian_vector(int d);
  Matrix gaussian_matrix(int rows, int cols);
  /// Sample from N(alpha, sigma) via the PSD square root of sigma.
  Vector gaussian_sample(const Vector& alpha, const Matrix& sigma_sqrt);

  static constexpr const char* name = "attnflow-splitmix64-v1";

private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace attnflow
