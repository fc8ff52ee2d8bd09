#include <Eigen/LU>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "attnflow/experiments.hpp"
#include "attnflow/rng.hpp"
#include "attnflow/transport.hpp"
#include "attnflow/version.hpp"

namespace attnflow {

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(Errc::ConfigError, "cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

const char* status_name(Termination t) {
  switch (t) {
    case Termination::Completed: return "completed";
    case Termination::BlowUp: return "blowup";
    case Termination::NumericalFailure: return "numerical_failure";
  }
  return "unknown";
}

Matrix spectral_normalized(Matrix m) {
  const double s = spectral_norm(m);
  if (s > 0.0) m /= s;
  return m;
}

void symmetrize_in_place(Matrix& sigma) {
  for (Eigen::Index i = 0; i < sigma.rows(); ++i)
    for (Eigen::Index j = i + 1; j < sigma.cols(); ++j) {
      const double avg = 0.5 * (sigma(i, j) + sigma(j, i));
      sigma(i, j) = avg;
      sigma(j, i) = avg;
    }
}

/// Random SPD with unit trace (trace-normalized Wishart).
Matrix random_spd_trace_one(CounterRng& rng, int d) {
  const Matrix b = rng.gaussian_matrix(d, d);
  Matrix s = b * b.transpose();
  s /= s.trace();
  return s;
}

/// Sweep construction: Q random floor(d/2) x d, K = -Q, so A = -Q^T Q is
/// symmetric negative of rank floor(d/2). V modes:
///   identity  - V = I_d;
///   random    - random full-rank SPD (normalized Wishart plus a small ridge),
///               which keeps the covariance flow bounded so limiting points
///               exist for every draw;
///   gaussian  - raw i.i.d. Gaussian V; kept for comparison, but for d >= 4
///               nearly every draw makes the flow blow up in finite time.
AttentionParams histogram_params(CounterRng& rng, Variant variant, int d,
                                 const std::string& v_mode) {
  const int k = std::max(d / 2, 1);
  const Matrix q = rng.gaussian_matrix(k, d);
  Matrix v;
  if (v_mode == "identity") {
    v = Matrix::Identity(d, d);
  } else if (v_mode == "random") {
    const Matrix b = rng.gaussian_matrix(d, d);
    v = spectral_normalized(b * b.transpose());
    v += 0.05 * Matrix::Identity(d, d);
    v = spectral_normalized(std::move(v));
  } else {
    v = spectral_normalized(rng.gaussian_matrix(d, d));
  }
  if (variant == Variant::L2) return AttentionParams::l2(q, -q, std::move(v));
  AttentionParams p = AttentionParams::softmax(q, -q, std::move(v));
  // Softmax depends on (A, V) only; scaling A is a pure time reparametrization
  const Matrix a = p.A();
  const double s = spectral_norm(a);
  if (s > 0.0) {
    p.Q = a / s;
    p.K = Matrix::Identity(d, d);
  }
  return p;
}

struct StationaryOutcome {
  Termination status = Termination::Completed;
  bool converged = false;
  double t_stop = 0.0;
  Matrix sigma;        // state when stationarity was declared (or at the cap)
  Matrix sigma_limit;  // extrapolated limit, see below
};

/// Allocation-free covariance derivative for the sweep variants. The
/// covariance equation is autonomous in Sigma, so the mean is dropped.
class CovarianceRhs {
public:
  CovarianceRhs(const AttentionParams& p, int d)
      : variant_(p.variant), a_(p.A()), v_(p.V), lu_(d) {
    identity_v_ = (v_ - Matrix::Identity(d, d)).norm() == 0.0;
    if (variant_ == Variant::L2) ktk2_ = 2.0 * p.K.transpose() * p.K;
    w_.resize(d, d);
    x_.resize(d, d);
    tmp_.resize(d, d);
    half_.resize(d, d);
  }

  // ds = M Sigma + (M Sigma)^T with M the variant's closed-form slope
  void operator()(const Matrix& sigma, Matrix& ds) {
    if (variant_ == Variant::Softmax) {
      tmp_.noalias() = sigma * a_;
      if (identity_v_) {
        half_.noalias() = tmp_ * sigma;
      } else {
        x_.noalias() = v_ * tmp_;
        half_.noalias() = x_ * sigma;
      }
    } else {  // L2
      w_.noalias() = ktk2_ * sigma;
      w_.diagonal().array() += 1.0;
      lu_.compute(w_);
      x_.noalias() = lu_.solve(a_);      // (I + 2K^T K Sigma)^-1 A
      tmp_.noalias() = sigma * x_;
      if (identity_v_) {
        half_.noalias() = 2.0 * tmp_ * sigma;
      } else {
        x_.noalias() = v_ * tmp_;
        half_.noalias() = 2.0 * x_ * sigma;
      }
    }
    ds = half_;
    ds += half_.transpose();
  }

private:
  Variant variant_;
  Matrix a_, v_, ktk2_;
  bool identity_v_ = false;
  Eigen::PartialPivLU<Matrix> lu_;
  Matrix w_, x_, tmp_, half_;
};

/// Fixed-step covariance integration with the spec's stationarity rule:
/// converged once ||dSigma/dt||_F < conv_tol * (1 + ||Sigma||_F) for
/// conv_window consecutive steps.
///
/// The slow eigenvalues of these flows vanish like c/t, so the state at the
/// declaration time T still carries O(c/T) remnants of every collapsing
/// direction. Continuing to 2T and forming 2 Sigma(2T) - Sigma(T) cancels the
/// 1/t tail exactly, which is what sigma_limit reports.
StationaryOutcome integrate_until_stationary(const AttentionParams& p, Matrix sigma,
                                             const SolverConfig& cfg, double conv_tol,
                                             int conv_window) {
  const int d = static_cast<int>(sigma.rows());
  const auto nsteps = static_cast<long long>(std::llround(cfg.t_end / cfg.dt));
  StationaryOutcome out;
  int quiet = 0;
  CovarianceRhs rhs(p, d);
  Matrix k1(d, d), k2(d, d), k3(d, d), k4(d, d), stage(d, d), sig_dot(d, d);

  auto advance = [&](Matrix& s) {
    if (cfg.method == SolverConfig::Method::Euler) {
      rhs(s, sig_dot);
      s += cfg.dt * sig_dot;
    } else {
      rhs(s, k1);
      stage = s + (0.5 * cfg.dt) * k1;
      rhs(stage, k2);
      stage = s + (0.5 * cfg.dt) * k2;
      rhs(stage, k3);
      stage = s + cfg.dt * k3;
      rhs(stage, k4);
      sig_dot = (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
      s += cfg.dt * sig_dot;
    }
  };

  for (long long step = 0; step < nsteps; ++step) {
    advance(sigma);
    const double t_next = (step + 1) * cfg.dt;
    if (!sigma.allFinite()) {
      out.status = Termination::NumericalFailure;
      out.t_stop = t_next;
      out.sigma = Matrix::Zero(d, d);
      out.sigma_limit = out.sigma;
      return out;
    }
    if (sigma.norm() > cfg.blowup_threshold) {
      out.status = Termination::BlowUp;
      out.t_stop = t_next;
      out.sigma = sigma;
      out.sigma_limit = sigma;
      return out;
    }
    symmetrize_in_place(sigma);
    if (sig_dot.norm() < conv_tol * (1.0 + sigma.norm())) {
      if (++quiet >= conv_window) {
        out.converged = true;
        out.t_stop = t_next;
        out.sigma = sigma;
        // refine: integrate the same number of steps again and extrapolate
        Matrix sigma2 = sigma;
        for (long long extra = 0; extra <= step; ++extra) {
          advance(sigma2);
          if (!sigma2.allFinite()) break;
          symmetrize_in_place(sigma2);
        }
        if (sigma2.allFinite()) {
          out.sigma_limit = 2.0 * sigma2 - sigma;
          symmetrize_in_place(out.sigma_limit);
        } else {
          out.sigma_limit = sigma;
        }
        return out;
      }
    } else {
      quiet = 0;
    }
  }
  out.t_stop = nsteps * cfg.dt;
  out.sigma = sigma;
  out.sigma_limit = sigma;
  return out;
}

nlohmann::json config_echo(const ExperimentConfig& cfg) {
  try {
    return nlohmann::json::parse(cfg.raw_json);
  } catch (...) {
    return nlohmann::json(cfg.raw_json);
  }
}

}  // namespace

void write_manifest(const std::filesystem::path& out_dir, const ExperimentConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json m;
  m["seed"] = cfg.seed;
  m["version"] = kVersion;
  m["git_hash"] = kGitHash;
  m["rng"] = CounterRng::name;
  m["config"] = config_echo(cfg);
  std::ofstream out(out_dir / "manifest.json");
  if (!out) fail(Errc::ConfigError, "cannot write manifest to " + out_dir.string());
  out << m.dump(2) << "\n";
}

Cone2DResult run_cone2d(const ExperimentConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir) {
  if (cfg.dimension != 2) fail(Errc::ConfigError, "cone2d requires dimension = 2");
  if (!cfg.params) fail(Errc::ConfigError, "cone2d requires fixed params");
  cfg.params->validate(2);

  // equal-trace grid orthogonal to the z axis: z = trace, (x, y) inside the cone
  std::vector<Matrix> inits;
  const double z = cfg.cone2d.trace;
  const int g = cfg.cone2d.grid;
  for (int iy = 0; iy < g; ++iy) {
    for (int ix = 0; ix < g; ++ix) {
      const double fx = g == 1 ? 0.0 : -1.0 + 2.0 * ix / (g - 1);
      const double fy = g == 1 ? 0.0 : -1.0 + 2.0 * iy / (g - 1);
      const double x = cfg.cone2d.extent * z * fx;
      const double y = cfg.cone2d.extent * z * fy;
      if (std::hypot(x, y) >= 0.999 * z) continue;  // keep strictly inside the cone
      Matrix s(2, 2);
      s << (z + x) / 2.0, y / 2.0, y / 2.0, (z - x) / 2.0;
      inits.push_back(std::move(s));
    }
  }

  Cone2DResult result;
  result.tracks.resize(inits.size());
  const ParameterSchedule schedule(*cfg.params);
  parallel_for(static_cast<int>(inits.size()), cfg.threads, [&](int i) {
    const GaussianMeasure g0(Vector::Zero(2), inits[i]);
    result.tracks[i] = {i, inits[i], integrate_moments(schedule, g0, cfg.solver)};
  });

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_manifest(*out_dir, cfg);
    auto summary = open_csv(*out_dir / "summary.csv");
    summary << "index,x0,y0,z0,status,t_event,final_frobenius,final_rank\n";
    for (const auto& track : result.tracks) {
      std::ostringstream name;
      name << "trajectory_" << std::setw(3) << std::setfill('0') << track.index << ".csv";
      auto csv = open_csv(*out_dir / name.str());
      csv << "t,s11,s12,s22,x,y,z,xn,yn,status\n";
      for (std::size_t k = 0; k < track.trajectory.states.size(); ++k) {
        const auto& st = std::get<MomentState>(track.trajectory.states[k]);
        const double a = st.sigma(0, 0), b = st.sigma(1, 1), c = st.sigma(0, 1);
        const double cx = a - b, cy = 2.0 * c, cz = a + b;
        csv << track.trajectory.times[k] << ',' << a << ',' << c << ',' << b << ',' << cx << ','
            << cy << ',' << cz << ',' << (cz > 0 ? cx / cz : 0.0) << ','
            << (cz > 0 ? cy / cz : 0.0) << ',' << status_name(track.trajectory.status.kind)
            << '\n';
      }
      const auto& last = std::get<MomentState>(track.trajectory.states.back());
      summary << track.index << ',' << track.sigma0(0, 0) - track.sigma0(1, 1) << ','
              << 2.0 * track.sigma0(0, 1) << ',' << track.sigma0.trace() << ','
              << status_name(track.trajectory.status.kind) << ',' << track.trajectory.status.t
              << ',' << last.sigma.norm() << ','
              << rank_eps(Matrix(0.5 * (last.sigma + last.sigma.transpose())), cfg.rank_tol)
              << '\n';
    }
  }
  return result;
}

RankHistogramResult run_rank_histogram(const ExperimentConfig& cfg,
                                       const std::optional<std::filesystem::path>& out_dir) {
  if (cfg.variant != Variant::Softmax && cfg.variant != Variant::L2)
    fail(Errc::ConfigError, "rank-hist supports softmax and l2 variants");
  const int d = cfg.dimension;

  RankHistogramResult result;
  result.runs.resize(cfg.rank_hist.runs);
  parallel_for(cfg.rank_hist.runs, cfg.threads, [&](int i) {
    CounterRng rng(cfg.seed, static_cast<std::uint64_t>(i));
    const AttentionParams p = histogram_params(rng, cfg.variant, d, cfg.rank_hist.v_mode);
    const Matrix sigma0 = random_spd_trace_one(rng, d);
    const StationaryOutcome o = integrate_until_stationary(
        p, sigma0, cfg.solver, cfg.rank_hist.conv_tol, cfg.rank_hist.conv_window);
    RankHistogramResult::Run run;
    run.index = i;
    run.status = o.status;
    run.converged = o.converged;
    run.t_stop = o.t_stop;
    if (o.converged) run.rank = rank_eps(o.sigma_limit, cfg.rank_tol);
    result.runs[i] = run;
  });
  for (const auto& run : result.runs) {
    if (run.converged) {
      ++result.converged;
      ++result.rank_counts[run.rank];
    } else if (run.status == Termination::BlowUp) {
      ++result.blow_up;
    } else if (run.status == Termination::NumericalFailure) {
      ++result.failed;
    } else {
      ++result.not_converged;
    }
  }

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_manifest(*out_dir, cfg);
    auto hist = open_csv(*out_dir / "histogram.csv");
    hist << "rank,count\n";
    for (const auto& [rank, count] : result.rank_counts) hist << rank << ',' << count << '\n';
    hist << "converged," << result.converged << '\n';
    hist << "not_converged," << result.not_converged << '\n';
    hist << "blow_up," << result.blow_up << '\n';
    hist << "numerical_failure," << result.failed << '\n';
    auto runs = open_csv(*out_dir / "runs.csv");
    runs << "index,status,converged,t_stop,rank\n";
    for (const auto& run : result.runs)
      runs << run.index << ',' << status_name(run.status) << ',' << (run.converged ? 1 : 0) << ','
           << run.t_stop << ',' << run.rank << '\n';
  }
  return result;
}

MeanFieldResult run_meanfield(const ExperimentConfig& cfg,
                              const std::optional<std::filesystem::path>& out_dir) {
  if (!cfg.params) fail(Errc::ConfigError, "meanfield requires fixed params");
  const int d = cfg.dimension;
  cfg.params->validate(d);
  if (cfg.meanfield.alpha0.size() != d || cfg.meanfield.sigma0.rows() != d)
    fail(Errc::ConfigError, "meanfield needs alpha0 and sigma0 of the configured dimension");

  const GaussianMeasure g0(cfg.meanfield.alpha0, cfg.meanfield.sigma0);
  const ParameterSchedule schedule(*cfg.params);

  // moment-ODE reference at a finer step
  SolverConfig ref_cfg = cfg.solver;
  ref_cfg.method = SolverConfig::Method::RK4;
  ref_cfg.dt = std::min(cfg.solver.dt, 1e-3);
  ref_cfg.record_every = 1 << 30;
  const Trajectory ref_traj = integrate_moments(schedule, g0, ref_cfg);
  if (!ref_traj.completed()) fail(Errc::StepFailure, "moment reference did not complete");
  const auto& ref = std::get<MomentState>(ref_traj.states.back());

  const Matrix sqrt_sigma = psd_sqrt(g0.sigma);
  auto sample_tokens = [&](int n) {
    // the RNG stream is keyed by n, so the reference run is bit-reproducible
    CounterRng rng(cfg.seed, static_cast<std::uint64_t>(n));
    std::vector<Vector> tokens(n);
    for (int i = 0; i < n; ++i) tokens[i] = rng.gaussian_sample(g0.alpha, sqrt_sigma);
    return tokens;
  };
  auto final_tokens = [&](const Trajectory& traj) {
    return std::get<ParticleState>(traj.states.back()).tokens;
  };

  SolverConfig particle_cfg = cfg.solver;
  particle_cfg.record_every = 1 << 30;
  const Trajectory ref_particles =
      integrate_particles(schedule, EmpiricalMeasure(sample_tokens(cfg.meanfield.reference_n)),
                          particle_cfg);
  if (!ref_particles.completed()) fail(Errc::StepFailure, "reference particle run failed");
  const auto ref_cloud = final_tokens(ref_particles);

  MeanFieldResult result;
  result.alpha_ref = ref.alpha;
  result.sigma_ref = ref.sigma;
  result.rows.resize(cfg.meanfield.n_values.size());
  parallel_for(static_cast<int>(cfg.meanfield.n_values.size()), cfg.threads, [&](int idx) {
    const int n = cfg.meanfield.n_values[idx];
    const Trajectory traj =
        integrate_particles(schedule, EmpiricalMeasure(sample_tokens(n)), particle_cfg);
    if (!traj.completed()) fail(Errc::StepFailure, "particle run failed at n=" + std::to_string(n));
    const auto cloud = final_tokens(traj);
    const EmpiricalMeasure emp(cloud);
    MeanFieldResult::Row row;
    row.n = n;
    row.cov_err = (emp.covariance() - ref.sigma).norm();
    row.mean_err = (emp.mean() - ref.alpha).norm();
    // subsampled exact W2 against the reference cloud; both subsamples draw
    // from the same index stream so n == reference_n compares a run to itself
    const int m = std::min({cfg.meanfield.w2_subsample, n, cfg.meanfield.reference_n});
    auto subsample = [&](const std::vector<Vector>& from) {
      CounterRng pick(cfg.seed ^ 0x77aa55ccULL, static_cast<std::uint64_t>(n));
      std::vector<Vector> out(m);
      for (int i = 0; i < m; ++i)
        out[i] = from[static_cast<std::size_t>(pick.next_u64() % from.size())];
      return out;
    };
    row.w2 = wasserstein_discrete(2, subsample(cloud), subsample(ref_cloud));
    result.rows[idx] = row;
  });

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_manifest(*out_dir, cfg);
    auto csv = open_csv(*out_dir / "meanfield.csv");
    csv << "n,cov_frobenius_error,mean_error,w2_subsampled,reference_n\n";
    for (const auto& row : result.rows)
      csv << row.n << ',' << row.cov_err << ',' << row.mean_err << ',' << row.w2 << ','
          << cfg.meanfield.reference_n << '\n';
  }
  return result;
}

Trajectory run_single(const ExperimentConfig& cfg,
                      const std::optional<std::filesystem::path>& out_dir) {
  if (!cfg.params) fail(Errc::ConfigError, "run requires fixed params");
  if (!cfg.initial_gaussian && !cfg.initial_particles)
    fail(Errc::ConfigError, "run requires initial data");
  const ParameterSchedule schedule(*cfg.params);

  Trajectory traj = cfg.initial_gaussian
                        ? integrate_moments(schedule, *cfg.initial_gaussian, cfg.solver)
                        : integrate_particles(schedule, *cfg.initial_particles, cfg.solver);

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_manifest(*out_dir, cfg);
    auto csv = open_csv(*out_dir / "trajectory.csv");
    if (traj.holds_moments()) {
      const int d = std::get<MomentState>(traj.states.front()).alpha.size();
      csv << "t";
      for (int i = 0; i < d; ++i) csv << ",alpha_" << i;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) csv << ",sigma_" << i << '_' << j;
      csv << ",status\n";
      for (std::size_t k = 0; k < traj.states.size(); ++k) {
        const auto& st = std::get<MomentState>(traj.states[k]);
        csv << traj.times[k];
        for (int i = 0; i < d; ++i) csv << ',' << st.alpha(i);
        for (int i = 0; i < d; ++i)
          for (int j = i; j < d; ++j) csv << ',' << st.sigma(i, j);
        csv << ',' << status_name(traj.status.kind) << '\n';
      }
    } else {
      const auto& first = std::get<ParticleState>(traj.states.front());
      const int d = static_cast<int>(first.tokens.front().size());
      csv << "t,token";
      if (cfg.initial_particles->positions) csv << ",position";
      for (int i = 0; i < d; ++i) csv << ",x_" << i;
      csv << ",status\n";
      for (std::size_t k = 0; k < traj.states.size(); ++k) {
        const auto& st = std::get<ParticleState>(traj.states[k]);
        for (std::size_t tok = 0; tok < st.tokens.size(); ++tok) {
          csv << traj.times[k] << ',' << tok;
          if (cfg.initial_particles->positions)
            csv << ',' << (*cfg.initial_particles->positions)[tok];
          for (int i = 0; i < d; ++i) csv << ',' << st.tokens[tok](i);
          csv << ',' << status_name(traj.status.kind) << '\n';
        }
      }
    }
  }
  return traj;
}

}  // namespace attnflow
