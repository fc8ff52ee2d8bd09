#include <doctest.h>

#include <cmath>

#include "attnflow/attention.hpp"
#include "attnflow/rng.hpp"

using namespace attnflow;

namespace {

Vector vec2(double x, double y) {
  Vector v(2);
  v << x, y;
  return v;
}

// deliberately naive softmax velocity, kept independent of the library path
Vector brute_force_softmax(const Matrix& Q, const Matrix& K, const Matrix& V,
                           const std::vector<Vector>& tokens, const Vector& x) {
  double den = 0.0;
  Vector num = Vector::Zero(x.size());
  for (const auto& xj : tokens) {
    const double w = std::exp((Q * x).dot(K * xj));
    den += w;
    num += w * (V * xj);
  }
  return num / den;
}

}  // namespace

TEST_CASE("softmax velocity: symmetric pair cancels at the origin") {
  const EmpiricalMeasure mu({vec2(1, 0), vec2(-1, 0)});
  const AttentionParams p = AttentionParams::softmax(Matrix::Identity(2, 2),
                                                     Matrix::Identity(2, 2),
                                                     Matrix::Identity(2, 2));
  CHECK(velocity_discrete(p, mu, vec2(0, 0)).norm() < 1e-15);
}

TEST_CASE("softmax velocity: tanh closed form for the antipodal pair") {
  const EmpiricalMeasure mu({vec2(1, 0), vec2(-1, 0)});
  const AttentionParams p = AttentionParams::softmax(Matrix::Identity(2, 2),
                                                     Matrix::Identity(2, 2),
                                                     Matrix::Identity(2, 2));
  const Vector g = velocity_discrete(p, mu, vec2(1, 0));
  CHECK(g(0) == doctest::Approx(std::tanh(1.0)).epsilon(1e-12));
  CHECK(g(0) == doctest::Approx(0.76159).epsilon(1e-4));
  CHECK(std::abs(g(1)) < 1e-15);

  const Vector bf = brute_force_softmax(p.Q, p.K, p.V, mu.tokens, vec2(1, 0));
  CHECK((g - bf).norm() < 1e-12);
}

TEST_CASE("normalized variants send every x to V x1 for a single token") {
  CounterRng rng(21, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 1 + static_cast<int>(rng.next_u64() % 3);
    const Vector x1 = rng.gaussian_vector(d);
    const EmpiricalMeasure mu({x1});
    const Matrix v = rng.gaussian_matrix(d, d);
    const AttentionParams sm = AttentionParams::softmax_a(rng.gaussian_matrix(d, d), v);
    const AttentionParams l2 =
        AttentionParams::l2(rng.gaussian_matrix(d, d), rng.gaussian_matrix(d, d), v);
    const Vector x = 3.0 * rng.gaussian_vector(d);
    CHECK((velocity_discrete(sm, mu, x) - v * x1).norm() < 1e-12);
    CHECK((velocity_discrete(l2, mu, x) - v * x1).norm() < 1e-12);
  }
}

TEST_CASE("softmax agrees with the brute-force oracle on random configs") {
  CounterRng rng(22, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const int d = 1 + static_cast<int>(rng.next_u64() % 4);
    const int k = 1 + static_cast<int>(rng.next_u64() % d);
    const int n = 2 + static_cast<int>(rng.next_u64() % 8);
    std::vector<Vector> tokens(n);
    for (auto& t : tokens) t = rng.gaussian_vector(d);
    const Matrix q = rng.gaussian_matrix(k, d);
    const Matrix kk = rng.gaussian_matrix(k, d);
    const Matrix v = rng.gaussian_matrix(d, d);
    const Vector x = rng.gaussian_vector(d);
    const Vector got =
        velocity_discrete(AttentionParams::softmax(q, kk, v), EmpiricalMeasure(tokens), x);
    REQUIRE((got - brute_force_softmax(q, kk, v, tokens, x)).norm() < 1e-10);
  }
}

TEST_CASE("unnormalized and linear variants match direct sums") {
  CounterRng rng(23, 0);
  const int d = 2;
  std::vector<Vector> tokens{vec2(0.3, -1.1), vec2(0.9, 0.4), vec2(-0.5, 0.2)};
  const EmpiricalMeasure mu(tokens);
  const Matrix q = rng.gaussian_matrix(d, d);
  const Matrix k = rng.gaussian_matrix(d, d);
  const Matrix v = rng.gaussian_matrix(d, d);
  const Matrix a = k.transpose() * q;
  const Vector x = vec2(0.7, -0.2);

  Vector exp_sum = Vector::Zero(d), relu_sum = Vector::Zero(d), sig_sum = Vector::Zero(d);
  for (const auto& t : tokens) {
    const double s = (q * x).dot(k * t);
    exp_sum += std::exp(s) * (v * t);
    relu_sum += std::max(s, 0.0) * (v * t);
    sig_sum += 1.0 / (1.0 + std::exp(-s)) * (v * t);
  }
  CHECK((velocity_discrete(AttentionParams::unnormalized(Variant::Exp, q, k, v), mu, x) -
         exp_sum / 3.0).norm() < 1e-12);
  CHECK((velocity_discrete(AttentionParams::unnormalized(Variant::ReLU, q, k, v), mu, x) -
         relu_sum / 3.0).norm() < 1e-12);
  CHECK((velocity_discrete(AttentionParams::unnormalized(Variant::Sigmoid, q, k, v), mu, x) -
         sig_sum / 3.0).norm() < 1e-12);

  // linear: V (1/n sum x_j x_j^T) A x
  const Vector lin = velocity_discrete(AttentionParams::linear(q, k, v), mu, x);
  CHECK((lin - v * mu.second_moment() * a * x).norm() < 1e-12);

  // linear-eps: (1/(eps n)) sum V x_j + V (second moment - m m^T) A x
  const double eps = 0.01;
  const Vector le = velocity_discrete(AttentionParams::linear_eps(q, k, v, eps), mu, x);
  const Vector m = mu.mean();
  const Vector want = v * m / eps + v * (mu.second_moment() - m * m.transpose()) * a * x;
  CHECK((le - want).norm() < 1e-10);
}

TEST_CASE("multi-head velocity is the sum of its heads") {
  CounterRng rng(24, 0);
  const int d = 4, H = 2;
  std::vector<Vector> tokens(5);
  for (auto& t : tokens) t = rng.gaussian_vector(d);
  const EmpiricalMeasure mu(tokens);
  std::vector<AttentionHead> heads;
  for (int h = 0; h < H; ++h)
    heads.push_back({rng.gaussian_matrix(d / H, d), rng.gaussian_matrix(d / H, d),
                     rng.gaussian_matrix(d, d)});
  const Vector x = rng.gaussian_vector(d);
  const Vector got = velocity_discrete(AttentionParams::multi_head(heads), mu, x);
  Vector want = Vector::Zero(d);
  for (const auto& h : heads)
    want += velocity_discrete(AttentionParams::softmax(h.Q, h.K, h.V), mu, x);
  CHECK((got - want).norm() < 1e-12);
}

TEST_CASE("dimension and variant errors") {
  const EmpiricalMeasure mu({vec2(0, 0)});
  const AttentionParams p = AttentionParams::softmax(Matrix::Identity(2, 2),
                                                     Matrix::Identity(2, 2),
                                                     Matrix::Identity(2, 2));
  CHECK_THROWS_AS(velocity_discrete(p, mu, Vector::Zero(3)), Error);

  AttentionParams sink = AttentionParams::sinkhorn(Matrix::Identity(2, 2),
                                                   Matrix::Identity(2, 2),
                                                   Matrix::Identity(2, 2), 1.0);
  try {
    velocity_discrete(sink, mu, vec2(0, 0));
    FAIL("missing kernel not detected");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MissingKernel);
  }
}

TEST_CASE("batch velocity matches pointwise evaluation") {
  CounterRng rng(25, 0);
  const int d = 3, n = 7;
  Matrix X(n, d);
  for (int i = 0; i < n; ++i) X.row(i) = rng.gaussian_vector(d).transpose();
  const EmpiricalMeasure mu(detail::matrix_to_tokens(X));

  for (Variant variant : {Variant::Softmax, Variant::Linear, Variant::LinearEps, Variant::L2,
                          Variant::Exp, Variant::ReLU, Variant::Sigmoid, Variant::Sinkhorn}) {
    AttentionParams p;
    p.variant = variant;
    p.Q = rng.gaussian_matrix(d, d);
    p.K = rng.gaussian_matrix(d, d);
    p.V = rng.gaussian_matrix(d, d);
    p.eps = 0.8;
    const Matrix batch = detail::velocity_batch(p, X);
    DiscreteKernel kernel;
    if (variant == Variant::Sinkhorn) kernel = sinkhorn_kernel_discrete(mu, p);
    for (int i = 0; i < n; ++i) {
      const Vector pointwise = velocity_discrete(
          p, mu, Vector(X.row(i).transpose()),
          variant == Variant::Sinkhorn ? &kernel : nullptr);
      REQUIRE((batch.row(i).transpose() - pointwise).norm() <
              1e-10 * (1.0 + pointwise.norm()));
    }
  }
}
