#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "attnflow/experiments.hpp"
#include "attnflow/validation.hpp"
#include "attnflow/version.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitValidation = 3;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* opt = cmd->add_option("--config", args.config_path, "JSON experiment config");
  if (config_required) opt->required();
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--out", args.out, "override the output directory");
  cmd->add_option("--threads", args.threads, "worker threads (0 = hardware)");
}

attnflow::ExperimentConfig load(const CommonArgs& args, attnflow::ExperimentKind expected) {
  attnflow::ExperimentConfig cfg = attnflow::load_config_file(args.config_path);
  if (cfg.experiment != expected)
    attnflow::fail(attnflow::Errc::ConfigError, "config experiment does not match subcommand");
  if (args.seed) cfg.seed = *args.seed;
  if (args.out) cfg.out_dir = *args.out;
  if (args.threads) cfg.threads = *args.threads;
  return cfg;
}

const char* status_text(attnflow::Termination t) {
  switch (t) {
    case attnflow::Termination::Completed: return "completed";
    case attnflow::Termination::BlowUp: return "blow-up";
    case attnflow::Termination::NumericalFailure: return "numerical failure";
  }
  return "unknown";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnflow: attention-dynamics simulation and validation"};
  app.set_version_flag("--version",
                       std::string(attnflow::kVersion) + " (" + attnflow::kGitHash + ")");
  app.require_subcommand(1);

  CommonArgs cone_args, rank_args, mean_args, run_args;
  CLI::App* cone = app.add_subcommand("cone2d", "covariance-cone trajectories (d = 2)");
  add_common(cone, cone_args, true);
  double rank_tol = -1.0;
  CLI::App* rank = app.add_subcommand("rank-hist", "limiting-rank histogram sweep");
  add_common(rank, rank_args, true);
  rank->add_option("--rank-tol", rank_tol, "relative eigenvalue tolerance for rank counting");
  CLI::App* mean = app.add_subcommand("meanfield", "particle vs moment-ODE convergence table");
  add_common(mean, mean_args, true);
  CLI::App* run = app.add_subcommand("run", "single trajectory (particle or Gaussian)");
  add_common(run, run_args, true);

  CommonArgs val_args;
  CLI::App* validate = app.add_subcommand("validate", "closed-form/oracle validation suite");
  validate->add_option("--seed", val_args.seed, "suite seed");
  validate->add_option("--out", val_args.out, "directory for the JSON report");
  validate->add_option("--threads", val_args.threads, "worker threads (0 = hardware)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cone->parsed()) {
      const auto cfg = load(cone_args, attnflow::ExperimentKind::Cone2D);
      const auto res = attnflow::run_cone2d(cfg, std::filesystem::path(cfg.out_dir));
      std::cout << "cone2d: " << res.tracks.size() << " trajectories written to " << cfg.out_dir
                << "\n";
      return kExitOk;
    }
    if (rank->parsed()) {
      auto cfg = load(rank_args, attnflow::ExperimentKind::RankHistogram);
      if (rank_tol > 0.0) cfg.rank_tol = rank_tol;
      const auto res = attnflow::run_rank_histogram(cfg, std::filesystem::path(cfg.out_dir));
      std::cout << "rank-hist: " << res.converged << " converged, " << res.blow_up
                << " blow-ups, " << res.not_converged + res.failed << " open; histogram in "
                << cfg.out_dir << "\n";
      return kExitOk;
    }
    if (mean->parsed()) {
      const auto cfg = load(mean_args, attnflow::ExperimentKind::MeanField);
      const auto res = attnflow::run_meanfield(cfg, std::filesystem::path(cfg.out_dir));
      for (const auto& row : res.rows)
        std::cout << "n=" << row.n << "  cov_err=" << row.cov_err << "  w2=" << row.w2 << "\n";
      return kExitOk;
    }
    if (run->parsed()) {
      const auto cfg = load(run_args, attnflow::ExperimentKind::SingleRun);
      const auto traj = attnflow::run_single(cfg, std::filesystem::path(cfg.out_dir));
      std::cout << "run: " << traj.states.size() << " states, status "
                << status_text(traj.status.kind) << "; trajectory in " << cfg.out_dir << "\n";
      return traj.completed() ? kExitOk : kExitNumerical;
    }
    if (validate->parsed()) {
      attnflow::ValidationOptions opts;
      if (val_args.seed) opts.seed = *val_args.seed;
      if (val_args.threads) opts.threads = *val_args.threads;
      const attnflow::ValidationReport rep = attnflow::run_validation_suite(opts);
      std::cout << rep.summary();
      if (val_args.out) {
        std::filesystem::create_directories(*val_args.out);
        std::ofstream json_out(std::filesystem::path(*val_args.out) / "validation.json");
        json_out << rep.to_json() << "\n";
        std::cout << "report written to " << *val_args.out << "/validation.json\n";
      }
      return rep.all_passed() ? kExitOk : kExitValidation;
    }
  } catch (const attnflow::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == attnflow::Errc::ConfigError || e.code() == attnflow::Errc::InvalidArgument
               ? kExitConfig
               : kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitConfig;
}
