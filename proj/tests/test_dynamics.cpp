#include <doctest.h>

#include <cmath>

#include "attnflow/dynamics.hpp"
#include "attnflow/rng.hpp"

using namespace attnflow;

namespace {

Matrix m1(double x) {
  Matrix m(1, 1);
  m << x;
  return m;
}

Vector v1(double x) {
  Vector v(1);
  v << x;
  return v;
}

SolverConfig rk4(double dt, double t_end, int record_every = 1 << 30) {
  SolverConfig cfg;
  cfg.method = SolverConfig::Method::RK4;
  cfg.dt = dt;
  cfg.t_end = t_end;
  cfg.record_every = record_every;
  return cfg;
}

}  // namespace

TEST_CASE("solver config invariants") {
  SolverConfig cfg;
  cfg.dt = 2.0;
  cfg.t_end = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.dt = 0.1;
  cfg.blowup_threshold = 0.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("single token with V = 0 stays put") {
  const EmpiricalMeasure mu({v1(0.7)});
  const AttentionParams p = AttentionParams::softmax_a(m1(2.0), m1(0.0));
  const Trajectory traj = integrate_particles(ParameterSchedule(p), mu, rk4(0.01, 1.0, 10));
  REQUIRE(traj.completed());
  for (const auto& st : traj.states)
    CHECK(std::get<ParticleState>(st).tokens[0](0) == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("single token under softmax follows x' = V x exactly") {
  CounterRng rng(61, 0);
  const int d = 3;
  const Vector x0 = rng.gaussian_vector(d);
  const AttentionParams p =
      AttentionParams::softmax_a(rng.gaussian_matrix(d, d), Matrix::Identity(d, d));
  const Trajectory traj =
      integrate_particles(ParameterSchedule(p), EmpiricalMeasure({x0}), rk4(1e-3, 1.0));
  REQUIRE(traj.completed());
  const Vector got = std::get<ParticleState>(traj.states.back()).tokens[0];
  CHECK((got - std::exp(1.0) * x0).norm() < 1e-8 * x0.norm());
}

TEST_CASE("antipodal tokens with V = -I contract monotonically") {
  Vector u(2);
  u << 0.8, 0.6;
  const EmpiricalMeasure mu({u, Vector(-u)});
  const AttentionParams p =
      AttentionParams::softmax_a(Matrix::Identity(2, 2), Matrix(-Matrix::Identity(2, 2)));
  const Trajectory traj = integrate_particles(ParameterSchedule(p), mu, rk4(1e-3, 2.0, 100));
  REQUIRE(traj.completed());
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& st : traj.states) {
    const double norm = std::get<ParticleState>(st).tokens[0].norm();
    CHECK(norm < prev + 1e-12);
    prev = norm;
  }
  // fine-step reference run as an independent check of the endpoint
  SolverConfig fine;
  fine.method = SolverConfig::Method::Euler;
  fine.dt = 1e-5;
  fine.t_end = 2.0;
  fine.record_every = 1 << 30;
  const Trajectory ref = integrate_particles(ParameterSchedule(p), mu, fine);
  CHECK((std::get<ParticleState>(traj.states.back()).tokens[0] -
         std::get<ParticleState>(ref.states.back()).tokens[0]).norm() < 1e-4);
}

TEST_CASE("moment ODE d=1: s(1) = 1/3 for a=1, v=-1") {
  const Trajectory traj =
      integrate_moments(ParameterSchedule(AttentionParams::softmax_a(m1(1.0), m1(-1.0))),
                        GaussianMeasure(v1(0.0), m1(1.0)), rk4(1e-3, 1.0));
  REQUIRE(traj.completed());
  CHECK(std::get<MomentState>(traj.states.back()).sigma(0, 0) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("moment ODE d=1 blow-up detected near t_max = 0.5") {
  SolverConfig cfg = rk4(2e-4, 1.0);
  const Trajectory traj =
      integrate_moments(ParameterSchedule(AttentionParams::softmax_a(m1(1.0), m1(1.0))),
                        GaussianMeasure(v1(0.0), m1(1.0)), cfg);
  REQUIRE(traj.status.kind == Termination::BlowUp);
  CHECK(traj.status.t > 0.495);
  CHECK(traj.status.t < 0.505);
  // the last recorded covariance exceeds the divergence threshold
  CHECK(std::get<MomentState>(traj.states.back()).sigma.norm() > cfg.blowup_threshold);
}

TEST_CASE("A = 0 freezes the covariance and the mean flows linearly") {
  CounterRng rng(62, 0);
  const int d = 3;
  const Matrix v = rng.gaussian_matrix(d, d);
  const Matrix b = rng.gaussian_matrix(d, d);
  const Matrix sigma0 = b * b.transpose() + Matrix::Identity(d, d);
  const Vector alpha0 = rng.gaussian_vector(d);
  const Trajectory traj =
      integrate_moments(ParameterSchedule(AttentionParams::softmax_a(Matrix::Zero(d, d), v)),
                        GaussianMeasure(alpha0, sigma0), rk4(1e-3, 1.0, 100));
  REQUIRE(traj.completed());
  for (const auto& st : traj.states)
    CHECK((std::get<MomentState>(st).sigma - sigma0).norm() < 1e-9);
  // alpha' = V alpha: compare against an eigendecomposition-free series bound
  // via a very fine Euler reference
  SolverConfig fine;
  fine.method = SolverConfig::Method::Euler;
  fine.dt = 1e-5;
  fine.t_end = 1.0;
  fine.record_every = 1 << 30;
  const Trajectory ref = integrate_moments(
      ParameterSchedule(AttentionParams::softmax_a(Matrix::Zero(d, d), v)),
      GaussianMeasure(alpha0, sigma0), fine);
  CHECK((std::get<MomentState>(traj.states.back()).alpha -
         std::get<MomentState>(ref.states.back()).alpha).norm() < 1e-4);
}

TEST_CASE("commuting closed form examples") {
  SUBCASE("V=I, A=-I, Sigma0=I, t=1 gives I/3") {
    const CommutingResult r = closed_form_commuting(Matrix::Identity(2, 2),
                                                    Matrix(-Matrix::Identity(2, 2)),
                                                    Matrix::Identity(2, 2), 1.0);
    REQUIRE(!r.blow_up);
    CHECK((r.sigma - Matrix::Identity(2, 2) / 3.0).norm() < 1e-12);
  }
  SUBCASE("t=0 returns Sigma0") {
    Matrix s0(2, 2);
    s0 << 2.0, 0.3, 0.3, 1.0;
    Matrix a(2, 2);
    a << -1.0, 0.1, 0.1, -2.0;
    const CommutingResult r = closed_form_commuting(s0, a, Matrix::Identity(2, 2), 0.0);
    REQUIRE(!r.blow_up);
    CHECK((r.sigma - s0).norm() < 1e-10);
  }
  SUBCASE("diagonal A keeps untouched directions: diag(1/21, 1) at t=10") {
    Matrix a(2, 2);
    a << -1.0, 0.0, 0.0, 0.0;
    const CommutingResult r =
        closed_form_commuting(Matrix::Identity(2, 2), a, Matrix::Identity(2, 2), 10.0);
    REQUIRE(!r.blow_up);
    CHECK(r.sigma(0, 0) == doctest::Approx(1.0 / 21.0).epsilon(1e-12));
    CHECK(r.sigma(1, 1) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("commutation violations are rejected") {
    Matrix v(2, 2);
    v << 1.0, 0.5, 0.0, 2.0;
    Matrix s0(2, 2);
    s0 << 1.0, 0.4, 0.4, 2.0;
    try {
      closed_form_commuting(s0, Matrix(-Matrix::Identity(2, 2)), v, 1.0);
      FAIL("expected CommutationViolated");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::CommutationViolated);
    }
  }
}

TEST_CASE("closed_form_dim1 across variants") {
  const Dim1Result sm = closed_form_dim1(Variant::Softmax, 1.0, -1.0, 1.0, 1.0);
  CHECK(!sm.blow_up);
  CHECK(sm.value == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  const Dim1Result blow = closed_form_dim1(Variant::Softmax, 1.0, 1.0, 1.0, 0.6);
  CHECK(blow.blow_up);
  CHECK(blow.t_max == doctest::Approx(0.5));

  // L2 with av < 0 decreases monotonically in t
  double prev = 1.0;
  for (double t : {0.5, 1.0, 2.0, 4.0}) {
    const double s = closed_form_dim1(Variant::L2, 1.0, -1.0, 1.0, t, 1.0).value;
    CHECK(s < prev);
    prev = s;
  }

  // Sinkhorn with av < 0 decays to zero (algebraically, s ~ 1/(2t))
  CHECK(closed_form_dim1(Variant::Sinkhorn, 1.0, -1.0, 1.0, 600.0, 1.0, 1.0).value < 1e-3);
}

TEST_CASE("rank-1 flow: scalar separable oracle and moment cross-check") {
  // d=1, V=I, A=-I: u' = -u^3, so u(t) = (1 + 2t)^{-1/2}
  const Trajectory traj =
      rank1_flow(v1(1.0), Matrix(-Matrix::Identity(1, 1)), Matrix::Identity(1, 1),
                 rk4(1e-4, 1.0));
  REQUIRE(traj.completed());
  const double u1 = std::get<ParticleState>(traj.states.back()).tokens[0](0);
  CHECK(u1 == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-8));
  CHECK(u1 == doctest::Approx(0.57735).epsilon(1e-4));
}

TEST_CASE("rank-1 stationarity: u in ker V freezes the factor") {
  Matrix v(2, 2);
  v << 1.0, 0.0, 0.0, 0.0;  // ker V = span(e2)
  Vector u0(2);
  u0 << 0.0, 1.0;
  CounterRng rng(63, 0);
  const Matrix a = rng.gaussian_matrix(2, 2);
  const Trajectory traj = rank1_flow(u0, a, v, rk4(1e-3, 1.0, 100));
  REQUIRE(traj.completed());
  for (const auto& st : traj.states)
    CHECK((std::get<ParticleState>(st).tokens[0] - u0).norm() < 1e-12);
}

TEST_CASE("rank1_flow against integrate_moments on Sigma = u u^T") {
  CounterRng rng(64, 0);
  const int d = 3;
  const Vector u0 = rng.gaussian_vector(d);
  const Matrix a = 0.5 * rng.gaussian_matrix(d, d);
  const Matrix v = 0.5 * rng.gaussian_matrix(d, d);
  const Trajectory uflow = rank1_flow(u0, a, v, rk4(1e-3, 1.0));
  const Trajectory mflow =
      integrate_moments(ParameterSchedule(AttentionParams::softmax_a(a, v)),
                        GaussianMeasure(Vector::Zero(d), Matrix(u0 * u0.transpose())),
                        rk4(1e-3, 1.0));
  REQUIRE(uflow.completed());
  REQUIRE(mflow.completed());
  const Vector u1 = std::get<ParticleState>(uflow.states.back()).tokens[0];
  const Matrix sigma1 = std::get<MomentState>(mflow.states.back()).sigma;
  CHECK((u1 * u1.transpose() - sigma1).norm() < 1e-6);
}

TEST_CASE("stationary rank bound examples") {
  CHECK(predict_stationary_rank_bound(Matrix(-Matrix::Identity(4, 4))) == 0);
  Matrix a = Matrix::Zero(3, 3);
  a(0, 0) = 1.0;
  a(1, 1) = -1.0;
  CHECK(predict_stationary_rank_bound(a) == 2);
  CHECK(predict_stationary_rank_bound(Matrix::Zero(5, 5)) == 5);
  CHECK_THROWS_AS(predict_stationary_rank_bound(Matrix::Ones(2, 3)), Error);
}

TEST_CASE("support radius bound for constant and piecewise schedules") {
  const AttentionParams p0 =
      AttentionParams::softmax_a(Matrix::Identity(2, 2), Matrix::Zero(2, 2));
  CHECK(support_radius_bound(2.0, ParameterSchedule(p0), 3.0) == doctest::Approx(2.0));

  const AttentionParams p1 =
      AttentionParams::softmax_a(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  CHECK(support_radius_bound(1.0, ParameterSchedule(p1), 1.0) ==
        doctest::Approx(std::exp(1.0)).epsilon(1e-12));

  AttentionParams p2 = p1;
  p2.V = 2.0 * Matrix::Identity(2, 2);
  const ParameterSchedule two_seg({{0.0, p1}, {0.5, p2}});
  CHECK(support_radius_bound(1.0, two_seg, 1.0) ==
        doctest::Approx(std::exp(1.5)).epsilon(1e-12));
}

TEST_CASE("support bound holds along normalized-variant particle runs") {
  CounterRng rng(65, 0);
  for (int trial = 0; trial < 5; ++trial) {
    const int d = 2, n = 8;
    std::vector<Vector> tokens(n);
    double r0 = 0.0;
    for (auto& t : tokens) {
      t = rng.gaussian_vector(d);
      r0 = std::max(r0, t.norm());
    }
    const AttentionParams p = AttentionParams::softmax_a(rng.gaussian_matrix(d, d),
                                                         rng.gaussian_matrix(d, d));
    SolverConfig cfg = rk4(1e-2, 1.0, 10);
    const Trajectory traj =
        integrate_particles(ParameterSchedule(p), EmpiricalMeasure(tokens), cfg);
    REQUIRE(traj.completed());
    const ParameterSchedule sched(p);
    for (std::size_t i = 0; i < traj.states.size(); ++i) {
      double max_norm = 0.0;
      for (const auto& tok : std::get<ParticleState>(traj.states[i]).tokens)
        max_norm = std::max(max_norm, tok.norm());
      CHECK(max_norm <=
            support_radius_bound(r0, sched, traj.times[i]) * (1.0 + 10.0 * cfg.dt));
    }
  }
}

TEST_CASE("sinkhorn moment flow keeps alpha on the matrix-exponential path") {
  // symmetric V so the reference exponential is easy to build
  Matrix v(2, 2);
  v << -0.4, 0.1, 0.1, -0.3;
  Matrix q(2, 2);
  q << 1.0, 0.2, 0.0, 0.9;
  const double eps = 0.7;
  Vector alpha0(2);
  alpha0 << 1.0, -0.5;
  Matrix sigma0(2, 2);
  sigma0 << 1.0, 0.2, 0.2, 0.8;
  const Trajectory traj =
      integrate_moments(ParameterSchedule(AttentionParams::sinkhorn(q, Matrix::Identity(2, 2),
                                                                    v, eps)),
                        GaussianMeasure(alpha0, sigma0), rk4(1e-3, 1.0));
  REQUIRE(traj.completed());
  const SymEig e = sym_eig(v);
  const Matrix expm = e.eigenvectors *
                      (e.eigenvalues.array() / eps).exp().matrix().asDiagonal() *
                      e.eigenvectors.transpose();
  CHECK((std::get<MomentState>(traj.states.back()).alpha - expm * alpha0).norm() < 1e-7);
}

TEST_CASE("piecewise-constant schedule switches the field at the breakpoint") {
  // V = I until t=0.5 then V = -I with A = 0: alpha grows then shrinks back.
  // Stages straddling the breakpoint cost O(dt) accuracy, hence the loose tol.
  AttentionParams up = AttentionParams::softmax_a(Matrix::Zero(1, 1), m1(1.0));
  AttentionParams down = AttentionParams::softmax_a(Matrix::Zero(1, 1), m1(-1.0));
  const ParameterSchedule sched({{0.0, up}, {0.5, down}});
  const Trajectory traj = integrate_moments(sched, GaussianMeasure(v1(1.0), m1(1.0)),
                                            rk4(1e-3, 1.0, 250));
  REQUIRE(traj.completed());
  bool saw_peak = false;
  for (std::size_t i = 0; i < traj.times.size(); ++i)
    if (std::abs(traj.times[i] - 0.5) < 1e-12 &&
        std::abs(std::get<MomentState>(traj.states[i]).alpha(0) - std::exp(0.5)) < 1e-2)
      saw_peak = true;
  CHECK(saw_peak);
  CHECK(std::get<MomentState>(traj.states.back()).alpha(0) == doctest::Approx(1.0).epsilon(1e-2));
}
