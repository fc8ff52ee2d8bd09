#include <doctest.h>

#include <cmath>

#include "attnflow/attention.hpp"
#include "attnflow/rng.hpp"

using namespace attnflow;

namespace {

Vector vec1(double x) {
  Vector v(1);
  v << x;
  return v;
}

}  // namespace

TEST_CASE("constant initial kernel is already bistochastic") {
  // all tokens equal, so kappa^0 is constant and the limit is identically 1
  const EmpiricalMeasure mu({vec1(0.5), vec1(0.5), vec1(0.5)});
  const AttentionParams p = AttentionParams::sinkhorn(Matrix::Identity(1, 1),
                                                      Matrix::Identity(1, 1),
                                                      Matrix::Identity(1, 1), 1.0);
  const DiscreteKernel k = sinkhorn_kernel_discrete(mu, p);
  CHECK((k.kappa - Matrix::Ones(3, 3)).norm() < 1e-10);
  CHECK(k.iterations <= 3);
}

TEST_CASE("two antipodal tokens give a symmetric bistochastic kernel") {
  const EmpiricalMeasure mu({vec1(1.0), vec1(-1.0)});
  const AttentionParams p = AttentionParams::sinkhorn(Matrix::Identity(1, 1),
                                                      Matrix::Identity(1, 1),
                                                      Matrix::Identity(1, 1), 1.0);
  const DiscreteKernel k = sinkhorn_kernel_discrete(mu, p);
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(k.kappa.row(i).mean() - 1.0) < 1e-10);
    CHECK(std::abs(k.kappa.col(i).mean() - 1.0) < 1e-10);
  }
  CHECK(std::abs(k.kappa(0, 1) - k.kappa(1, 0)) < 1e-10);  // symmetric cost
  CHECK(std::abs(k.kappa(0, 0) - k.kappa(1, 1)) < 1e-10);
  // closed form: kappa = [[l, 2-l], [2-l, l]] with l = 2 / (1 + e^-2)
  CHECK(k.kappa(0, 0) == doctest::Approx(2.0 / (1.0 + std::exp(-2.0))).epsilon(1e-9));
}

TEST_CASE("converged kernels are bistochastic on random measures") {
  CounterRng rng(31, 0);
  auto unit_norm = [](Matrix m) {
    const double s = spectral_norm(m);
    return s > 0.0 ? Matrix(m / s) : m;
  };
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng.next_u64() % 30);
    const int d = 1 + static_cast<int>(rng.next_u64() % 3);
    std::vector<Vector> tokens(n);
    for (auto& t : tokens) t = rng.gaussian_vector(d);
    const AttentionParams p =
        AttentionParams::sinkhorn(unit_norm(rng.gaussian_matrix(d, d)),
                                  unit_norm(rng.gaussian_matrix(d, d)),
                                  Matrix::Identity(d, d), 1.0);
    const DiscreteKernel k = sinkhorn_kernel_discrete(EmpiricalMeasure(tokens), p);
    for (int i = 0; i < n; ++i) {
      REQUIRE(std::abs(k.kappa.row(i).mean() - 1.0) < 1e-8);
      REQUIRE(std::abs(k.kappa.col(i).mean() - 1.0) < 1e-8);
    }
  }
}

TEST_CASE("non-convergence is reported, not silently returned") {
  // a generic cloud at small eps needs dozens of sweeps; two are not enough
  CounterRng rng(34, 0);
  std::vector<Vector> tokens(8);
  for (auto& t : tokens) t = rng.gaussian_vector(2);
  const EmpiricalMeasure mu(tokens);
  const AttentionParams p = AttentionParams::sinkhorn(Matrix::Identity(2, 2),
                                                      Matrix::Ones(2, 2),
                                                      Matrix::Identity(2, 2), 0.05);
  try {
    sinkhorn_kernel_discrete(mu, p, 2, 1e-13);
    FAIL("expected NotConverged");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NotConverged);
    CHECK(doctest::String(e.what()).size() > 0);
  }
  // the same kernel does converge when given enough iterations
  CHECK_NOTHROW(sinkhorn_kernel_discrete(mu, p, 100000, 1e-10));
}

TEST_CASE("off-support kernel row extends the support rows consistently") {
  CounterRng rng(32, 0);
  const int n = 12, d = 2;
  std::vector<Vector> tokens(n);
  for (auto& t : tokens) t = rng.gaussian_vector(d);
  const EmpiricalMeasure mu(tokens);
  const AttentionParams p = AttentionParams::sinkhorn(rng.gaussian_matrix(d, d),
                                                      rng.gaussian_matrix(d, d),
                                                      Matrix::Identity(d, d), 1.0);
  const DiscreteKernel k = sinkhorn_kernel_discrete(mu, p, 10000, 1e-12);

  // at a support point the dual-potential extension reproduces the stored row
  const Vector row = kernel_row_at(k, mu, p, tokens[3]);
  CHECK((row.transpose() - k.kappa.row(3)).norm() < 1e-8);

  // any query row is exactly mean-one (it is normalized by construction)
  const Vector q = rng.gaussian_vector(d) * 2.0;
  CHECK(std::abs(kernel_row_at(k, mu, p, q).mean() - 1.0) < 1e-12);
}

TEST_CASE("sinkhorn velocity stays in the V-scaled convex hull bound") {
  CounterRng rng(33, 0);
  const int n = 10, d = 2;
  std::vector<Vector> tokens(n);
  double radius = 0.0;
  for (auto& t : tokens) {
    t = rng.gaussian_vector(d);
    radius = std::max(radius, t.norm());
  }
  const EmpiricalMeasure mu(tokens);
  const Matrix v = rng.gaussian_matrix(d, d);
  AttentionParams p = AttentionParams::sinkhorn(rng.gaussian_matrix(d, d),
                                                rng.gaussian_matrix(d, d), v, 1.0);
  const DiscreteKernel k = sinkhorn_kernel_discrete(mu, p);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector x = 5.0 * rng.gaussian_vector(d);
    // Gamma/(1/eps) is a kernel-weighted average of V x_j, mean weights one
    CHECK(velocity_discrete(p, mu, x, &k).norm() <=
          spectral_norm(v) * radius / p.eps + 1e-9);
  }
}
