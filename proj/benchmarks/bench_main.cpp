#include <benchmark/benchmark.h>

#include "attnflow/attention.hpp"
#include "attnflow/dynamics.hpp"
#include "attnflow/rng.hpp"
#include "attnflow/transport.hpp"

using namespace attnflow;

namespace {

Matrix random_tokens_matrix(int n, int d, std::uint64_t seed) {
  CounterRng rng(seed, 0);
  return rng.gaussian_matrix(n, d);
}

void BM_softmax_velocity_batch(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int d = 4;
  const Matrix X = random_tokens_matrix(n, d, 1);
  CounterRng rng(2, 0);
  const AttentionParams p =
      AttentionParams::softmax_a(rng.gaussian_matrix(d, d), rng.gaussian_matrix(d, d));
  for (auto _ : state) benchmark::DoNotOptimize(detail::velocity_batch(p, X));
  state.SetComplexityN(n);
}
BENCHMARK(BM_softmax_velocity_batch)->Range(64, 2048)->Complexity();

void BM_sinkhorn_kernel(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  CounterRng rng(3, 0);
  std::vector<Vector> tokens(n);
  for (auto& t : tokens) t = rng.gaussian_vector(3);
  const EmpiricalMeasure mu(tokens);
  const AttentionParams p = AttentionParams::sinkhorn(
      rng.gaussian_matrix(3, 3), rng.gaussian_matrix(3, 3), Matrix::Identity(3, 3), 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(sinkhorn_kernel_discrete(mu, p));
}
BENCHMARK(BM_sinkhorn_kernel)->Range(32, 256);

void BM_moment_step_softmax(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  CounterRng rng(4, 0);
  const Matrix b = rng.gaussian_matrix(d, d);
  const GaussianMeasure g(rng.gaussian_vector(d),
                          Matrix(b * b.transpose() + Matrix::Identity(d, d)));
  const AttentionParams p =
      AttentionParams::softmax_a(rng.gaussian_matrix(d, d), rng.gaussian_matrix(d, d));
  SolverConfig cfg;
  cfg.method = SolverConfig::Method::Euler;
  cfg.dt = 1e-3;
  cfg.t_end = 1.0;
  cfg.record_every = 1 << 30;
  for (auto _ : state) benchmark::DoNotOptimize(integrate_moments(ParameterSchedule(p), g, cfg));
}
BENCHMARK(BM_moment_step_softmax)->DenseRange(2, 6, 2);

void BM_wasserstein_exact(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  CounterRng rng(5, 0);
  std::vector<Vector> xs(n), ys(n);
  for (auto& x : xs) x = rng.gaussian_vector(2);
  for (auto& y : ys) y = rng.gaussian_vector(2);
  for (auto _ : state) benchmark::DoNotOptimize(wasserstein_discrete(2, xs, ys));
}
BENCHMARK(BM_wasserstein_exact)->Range(64, 1024);

void BM_jacobi_eig(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  CounterRng rng(6, 0);
  const Matrix g = rng.gaussian_matrix(d, d);
  const Matrix s = 0.5 * (g + g.transpose());
  for (auto _ : state) benchmark::DoNotOptimize(sym_eig(s));
}
BENCHMARK(BM_jacobi_eig)->DenseRange(4, 16, 4);

}  // namespace

BENCHMARK_MAIN();
