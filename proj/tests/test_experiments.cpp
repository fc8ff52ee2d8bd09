#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "attnflow/experiments.hpp"
#include "attnflow/rng.hpp"
#include "attnflow/validation.hpp"

using namespace attnflow;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kRankHistJson = R"({
  "experiment": "rank-hist",
  "variant": "softmax",
  "dimension": 3,
  "seed": 99,
  "threads": 2,
  "rank_tol": 1e-3,
  "solver": {"method": "euler", "dt": 0.01, "t_end": 400.0, "record_every": 1000},
  "rank_hist": {"runs": 12, "v_mode": "identity"}
})";

}  // namespace

TEST_CASE("config parsing: happy path and overrides") {
  const ExperimentConfig cfg = parse_config(kRankHistJson);
  CHECK(cfg.experiment == ExperimentKind::RankHistogram);
  CHECK(cfg.variant == Variant::Softmax);
  CHECK(cfg.dimension == 3);
  CHECK(cfg.seed == 99);
  CHECK(cfg.rank_tol == doctest::Approx(1e-3));
  CHECK(cfg.solver.method == SolverConfig::Method::Euler);
  CHECK(cfg.rank_hist.runs == 12);
}

TEST_CASE("config parsing: errors carry ConfigError") {
  for (const char* bad :
       {"not json at all", R"({"experiment": "nope"})", R"({"experiment": "cone2d",
         "solver": {"dt": -1.0}})",
        R"({"experiment": "run", "variant": "softmax", "dimension": 0})"}) {
    try {
      parse_config(bad);
      FAIL("expected ConfigError for: ", bad);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ConfigError);
    }
  }
}

TEST_CASE("config parsing: fixed params via A or Q/K and single-run initial data") {
  const char* json = R"({
    "experiment": "run",
    "variant": "softmax",
    "dimension": 2,
    "solver": {"method": "rk4", "dt": 0.01, "t_end": 0.5},
    "params": {"A": [[-1.0, 0.0], [0.0, -1.0]], "V": [[1.0, 0.0], [0.0, 1.0]]},
    "run": {"initial": {"type": "gaussian", "alpha": [0.0, 0.0],
                        "sigma": [[1.0, 0.0], [0.0, 1.0]]}}
  })";
  const ExperimentConfig cfg = parse_config(json);
  REQUIRE(cfg.params.has_value());
  CHECK((cfg.params->A() + Matrix::Identity(2, 2)).norm() < 1e-14);
  REQUIRE(cfg.initial_gaussian.has_value());
  const Trajectory traj = run_single(cfg, std::nullopt);
  CHECK(traj.completed());
  CHECK(std::get<MomentState>(traj.states.back()).sigma(0, 0) < 1.0);
}

TEST_CASE("rank histogram: tiny deterministic sweep and CSV output") {
  const ExperimentConfig cfg = parse_config(kRankHistJson);
  const auto dir =
      std::filesystem::temp_directory_path() / "attnflow_test_rankhist";
  std::filesystem::remove_all(dir);
  const RankHistogramResult res = run_rank_histogram(cfg, dir);
  CHECK(res.runs.size() == 12);
  CHECK(res.converged + res.not_converged + res.blow_up + res.failed == 12);
  CHECK(std::filesystem::exists(dir / "histogram.csv"));
  CHECK(std::filesystem::exists(dir / "runs.csv"));
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  const std::string manifest = slurp(dir / "manifest.json");
  CHECK(manifest.find("git_hash") != std::string::npos);
  CHECK(manifest.find("attnflow-splitmix64-v1") != std::string::npos);

  // byte-identical rerun (the determinism acceptance criterion in miniature)
  const auto dir2 =
      std::filesystem::temp_directory_path() / "attnflow_test_rankhist2";
  std::filesystem::remove_all(dir2);
  run_rank_histogram(cfg, dir2);
  CHECK(slurp(dir / "histogram.csv") == slurp(dir2 / "histogram.csv"));
  CHECK(slurp(dir / "runs.csv") == slurp(dir2 / "runs.csv"));
}

TEST_CASE("cone2d writes one trajectory per grid point inside the cone") {
  const char* json = R"({
    "experiment": "cone2d",
    "variant": "softmax",
    "dimension": 2,
    "seed": 5,
    "solver": {"method": "euler", "dt": 0.01, "t_end": 5.0, "record_every": 50},
    "cone2d": {"grid": 3, "trace": 1.0, "extent": 0.6},
    "params": {"A": [[-1.0, 0.2], [0.2, -1.4]], "V": [[0.6, 0.1], [-0.1, 0.5]]}
  })";
  const ExperimentConfig cfg = parse_config(json);
  const auto dir = std::filesystem::temp_directory_path() / "attnflow_test_cone";
  std::filesystem::remove_all(dir);
  const Cone2DResult res = run_cone2d(cfg, dir);
  CHECK(res.tracks.size() > 0);
  CHECK(std::filesystem::exists(dir / "summary.csv"));
  for (const auto& track : res.tracks) {
    CHECK(track.trajectory.holds_moments());
    // every initialization sits on the configured equal-trace slice
    CHECK(track.sigma0.trace() == doctest::Approx(1.0).epsilon(1e-12));
  }
  // header advertises both raw cone coordinates and the trace-normalized ones
  std::ostringstream name;
  name << "trajectory_000.csv";
  const std::string csv = slurp(dir / name.str());
  CHECK(csv.rfind("t,s11,s12,s22,x,y,z,xn,yn,status", 0) == 0);
}

TEST_CASE("meanfield: n equal to the reference n reproduces the reference run") {
  ExperimentConfig cfg;
  cfg.experiment = ExperimentKind::MeanField;
  cfg.variant = Variant::Softmax;
  cfg.dimension = 2;
  cfg.seed = 31;
  cfg.threads = 1;
  cfg.solver.method = SolverConfig::Method::RK4;
  cfg.solver.dt = 0.05;
  cfg.solver.t_end = 0.5;
  Matrix a(2, 2), v(2, 2), s0(2, 2);
  a << -0.5, 0.1, 0.0, -0.4;
  v << 0.3, 0.0, 0.1, 0.4;
  s0 << 1.0, 0.1, 0.1, 0.8;
  cfg.params = AttentionParams::softmax_a(a, v);
  cfg.meanfield.n_values = {64, 128};
  cfg.meanfield.reference_n = 128;
  cfg.meanfield.w2_subsample = 64;
  cfg.meanfield.alpha0 = Vector::Zero(2);
  cfg.meanfield.sigma0 = s0;
  cfg.raw_json = "{}";
  const MeanFieldResult res = run_meanfield(cfg, std::nullopt);
  REQUIRE(res.rows.size() == 2);
  // the n = reference_n row compares the run against itself
  CHECK(res.rows[1].w2 == doctest::Approx(0.0));
  CHECK(res.rows[1].n == 128);
}

TEST_CASE("meanfield with V = 0: errors equal the pure sampling error") {
  ExperimentConfig cfg;
  cfg.experiment = ExperimentKind::MeanField;
  cfg.variant = Variant::Softmax;
  cfg.dimension = 2;
  cfg.seed = 32;
  cfg.threads = 1;
  cfg.solver.method = SolverConfig::Method::RK4;
  cfg.solver.dt = 0.05;
  cfg.solver.t_end = 0.5;
  Matrix s0(2, 2);
  s0 << 1.0, 0.2, 0.2, 0.9;
  cfg.params = AttentionParams::softmax_a(Matrix::Identity(2, 2), Matrix::Zero(2, 2));
  cfg.meanfield.n_values = {256};
  cfg.meanfield.reference_n = 64;
  cfg.meanfield.w2_subsample = 32;
  cfg.meanfield.alpha0 = Vector::Zero(2);
  cfg.meanfield.sigma0 = s0;
  cfg.raw_json = "{}";
  const MeanFieldResult res = run_meanfield(cfg, std::nullopt);
  // with a frozen flow the covariance gap is exactly the sampling gap at t=0
  CounterRng rng(cfg.seed, 256);
  std::vector<Vector> tokens(256);
  const Matrix root = psd_sqrt(s0);
  for (auto& t : tokens) t = rng.gaussian_sample(Vector::Zero(2), root);
  const double sampling_err = (EmpiricalMeasure(tokens).covariance() - s0).norm();
  CHECK(res.rows[0].cov_err == doctest::Approx(sampling_err).epsilon(1e-10));
}

TEST_CASE("mutation check: a corrupted Lemma-4.1 sign fails the parity suite") {
  GaussianFieldFn corrupted = [](const AttentionParams& p, const GaussianMeasure& g) {
    AffineField f = velocity_gaussian(p, g);
    if (p.variant == Variant::Softmax) f.b = -f.b;  // wrong sign on V alpha
    return f;
  };
  const CheckResult broken = check_gaussian_velocity_parity(2024, corrupted, /*quick=*/true);
  CHECK(!broken.passed);
}

TEST_CASE("parallel_for covers every index exactly once and propagates errors") {
  std::vector<int> hits(257, 0);
  parallel_for(257, 8, [&](int i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(
      parallel_for(16, 4, [](int i) { if (i == 7) fail(Errc::StepFailure, "boom"); }),
      Error);
}
