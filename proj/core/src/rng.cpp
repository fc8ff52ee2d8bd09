#include "attnflow/rng.hpp"

#include <cmath>

namespace attnflow {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream) {
  // decorrelate streams by hashing the stream index into the seed space
  std::uint64_t s = seed;
  std::uint64_t mix = splitmix64(s) ^ (stream * 0xda942042e4dd58b5ULL);
  state_ = mix;
  (void)splitmix64(state_);
}

std::uint64_t CounterRng::next_u64() { return splitmix64(state_); }

double CounterRng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::next_gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = next_double();
  } while (u1 <= 0.0);
  const double u2 = next_double();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Vector CounterRng::gaussian_vector(int d) {
  Vector v(d);
  for (int i = 0; i < d; ++i) v(i) = next_gaussian();
  return v;
}

Matrix CounterRng::gaussian_matrix(int rows, int cols) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = next_gaussian();
  return m;
}

Vector CounterRng::gaussian_sample(const Vector& alpha, const Matrix& sigma_sqrt) {
  return alpha + sigma_sqrt * gaussian_vector(static_cast<int>(alpha.size()));
}

}  // namespace attnflow
