#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attnflow/dynamics.hpp"

namespace attnflow {

enum class ExperimentKind { Cone2D, RankHistogram, MeanField, Validate, SingleRun };

struct Cone2DConfig {
  int grid = 7;          // grid side over the equal-trace slice
  double trace = 1.0;    // common trace of all initial covariances
  double extent = 0.85;  // fraction of the cone radius covered by the grid
};

struct RankHistConfig {
  int runs = 200;
  std::string v_mode = "identity";  // "identity" | "random" (spectral-norm 1)
  double conv_tol = 1e-8;           // ||dSigma/dt||_F < tol * (1 + ||Sigma||_F)
  int conv_window = 100;            // consecutive steps below the threshold
};

struct MeanFieldConfig {
  std::vector<int> n_values{256, 1024, 4096};
  int reference_n = 2048;
  int w2_subsample = 1024;  // pairwise-assignment size cap for the W2 column
  Vector alpha0;
  Matrix sigma0;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::SingleRun;
  Variant variant = Variant::Softmax;
  int dimension = 2;
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0 = hardware concurrency
  double rank_tol = 1e-6;
  SolverConfig solver;
  std::optional<AttentionParams> params;  // fixed-matrix mode
  Cone2DConfig cone2d;
  RankHistConfig rank_hist;
  MeanFieldConfig meanfield;
  std::optional<GaussianMeasure> initial_gaussian;    // single-run
  std::optional<EmpiricalMeasure> initial_particles;  // single-run
  std::string out_dir = "out";
  std::string raw_json;  // config echo for the manifest
};

/// Parse an ExperimentConfig from JSON text / a file. Shape or value problems
/// throw ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::filesystem::path& path);

/// Deterministic parallel map: fn(i) for i in [0, n), results slotted by
/// index, so aggregation is independent of the thread count.
void parallel_for(int n, unsigned threads, const std::function<void(int)>& fn);

void write_manifest(const std::filesystem::path& out_dir, const ExperimentConfig& cfg);

struct Cone2DResult {
  struct Track {
    int index = 0;
    Matrix sigma0;
    Trajectory trajectory;
  };
  std::vector<Track> tracks;
};

/// Covariance-cone trajectories on the 2-d equal-trace grid; emits one CSV per
/// initialization plus a summary when out_dir is given.
Cone2DResult run_cone2d(const ExperimentConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir);

struct RankHistogramResult {
  struct Run {
    int index = 0;
    Termination status = Termination::Completed;
    bool converged = false;
    double t_stop = 0.0;
    int rank = -1;  // converged runs only
  };
  std::map<int, int> rank_counts;  // converged runs
  int converged = 0;
  int not_converged = 0;
  int blow_up = 0;
  int failed = 0;
  std::vector<Run> runs;
};

/// Limiting-rank histogram over seeded random (A, V, Sigma0) draws with
/// A = K^T Q, K = -Q, Q random floor(d/2) x d.
RankHistogramResult run_rank_histogram(const ExperimentConfig& cfg,
                                       const std::optional<std::filesystem::path>& out_dir);

struct MeanFieldResult {
  struct Row {
    int n = 0;
    double cov_err = 0.0;   // Frobenius gap to the moment-ODE covariance
    double mean_err = 0.0;  // Euclidean gap to the moment-ODE mean
    double w2 = 0.0;        // subsampled W2 to the reference particle run
  };
  std::vector<Row> rows;
  Vector alpha_ref;  // moment-ODE solution at t_end
  Matrix sigma_ref;
};

MeanFieldResult run_meanfield(const ExperimentConfig& cfg,
                              const std::optional<std::filesystem::path>& out_dir);

/// Single trajectory (particle or Gaussian) from explicit initial data.
Trajectory run_single(const ExperimentConfig& cfg,
                      const std::optional<std::filesystem::path>& out_dir);

}  // namespace attnflow
