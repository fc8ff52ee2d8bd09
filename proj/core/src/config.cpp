#include <atomic>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "attnflow/experiments.hpp"

namespace attnflow {

namespace {

using nlohmann::json;

[[noreturn]] void bad_config(const std::string& what) { fail(Errc::ConfigError, what); }

Matrix parse_matrix(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) bad_config(key + " must be a nonempty array of rows");
  const auto rows = j.size();
  const auto cols = j.front().is_array() ? j.front().size() : 0;
  if (cols == 0) bad_config(key + " rows must be nonempty arrays");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!j[i].is_array() || j[i].size() != cols) bad_config(key + " rows have mixed lengths");
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

Vector parse_vector(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) bad_config(key + " must be a nonempty array");
  Vector v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::Softmax, Variant::Linear, Variant::LinearEps, Variant::L2,
                    Variant::Sinkhorn, Variant::Sigmoid, Variant::ReLU, Variant::Exp,
                    Variant::MultiHead, Variant::Masked})
    if (name == variant_name(v)) return v;
  bad_config("unknown variant '" + name + "'");
}

ExperimentKind parse_kind(const std::string& name) {
  if (name == "cone2d") return ExperimentKind::Cone2D;
  if (name == "rank-hist") return ExperimentKind::RankHistogram;
  if (name == "meanfield") return ExperimentKind::MeanField;
  if (name == "validate") return ExperimentKind::Validate;
  if (name == "run") return ExperimentKind::SingleRun;
  bad_config("unknown experiment '" + name + "'");
}

AttentionParams parse_params(const json& j, Variant variant) {
  AttentionParams p;
  p.variant = variant;
  if (variant == Variant::MultiHead) {
    if (!j.contains("heads")) bad_config("multihead params need a heads array");
    for (const auto& h : j.at("heads"))
      p.heads.push_back({parse_matrix(h.at("Q"), "head Q"), parse_matrix(h.at("K"), "head K"),
                         parse_matrix(h.at("V"), "head V")});
    return p;
  }
  if (!j.contains("V")) bad_config("params need V");
  p.V = parse_matrix(j.at("V"), "V");
  if (j.contains("A")) {
    p.Q = parse_matrix(j.at("A"), "A");
    p.K = Matrix::Identity(p.Q.rows(), p.Q.cols());
  } else {
    if (!j.contains("Q") || !j.contains("K")) bad_config("params need Q and K (or A)");
    p.Q = parse_matrix(j.at("Q"), "Q");
    p.K = parse_matrix(j.at("K"), "K");
  }
  if (j.contains("eps")) p.eps = j.at("eps").get<double>();
  if (variant == Variant::Masked) {
    if (!j.contains("inner")) bad_config("masked params need an inner variant");
    p.masked_inner = parse_variant(j.at("inner").get<std::string>());
  }
  return p;
}

SolverConfig parse_solver(const json& j) {
  SolverConfig s;
  if (j.contains("method")) {
    const std::string m = j.at("method").get<std::string>();
    if (m == "euler") s.method = SolverConfig::Method::Euler;
    else if (m == "rk4") s.method = SolverConfig::Method::RK4;
    else bad_config("solver.method must be 'euler' or 'rk4'");
  }
  if (j.contains("dt")) s.dt = j.at("dt").get<double>();
  if (j.contains("t_end")) s.t_end = j.at("t_end").get<double>();
  if (j.contains("blowup_threshold")) s.blowup_threshold = j.at("blowup_threshold").get<double>();
  if (j.contains("record_every")) s.record_every = j.at("record_every").get<int>();
  try {
    s.validate();
  } catch (const Error& e) {
    bad_config(std::string("solver: ") + e.what());
  }
  return s;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    bad_config(std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  cfg.raw_json = j.dump(2);
  try {
    if (!j.contains("experiment")) bad_config("missing 'experiment'");
    cfg.experiment = parse_kind(j.at("experiment").get<std::string>());
    if (j.contains("variant")) cfg.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("dimension")) cfg.dimension = j.at("dimension").get<int>();
    if (cfg.dimension < 1) bad_config("dimension must be >= 1");
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("threads")) cfg.threads = j.at("threads").get<unsigned>();
    if (j.contains("rank_tol")) cfg.rank_tol = j.at("rank_tol").get<double>();
    if (j.contains("solver")) cfg.solver = parse_solver(j.at("solver"));
    if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
    if (j.contains("params")) cfg.params = parse_params(j.at("params"), cfg.variant);

    if (j.contains("cone2d")) {
      const auto& c = j.at("cone2d");
      if (c.contains("grid")) cfg.cone2d.grid = c.at("grid").get<int>();
      if (c.contains("trace")) cfg.cone2d.trace = c.at("trace").get<double>();
      if (c.contains("extent")) cfg.cone2d.extent = c.at("extent").get<double>();
      if (cfg.cone2d.grid < 1 || !(cfg.cone2d.trace > 0.0) || !(cfg.cone2d.extent > 0.0) ||
          cfg.cone2d.extent >= 1.0)
        bad_config("cone2d needs grid >= 1, trace > 0, extent in (0,1)");
    }
    if (j.contains("rank_hist")) {
      const auto& c = j.at("rank_hist");
      if (c.contains("runs")) cfg.rank_hist.runs = c.at("runs").get<int>();
      if (c.contains("v_mode")) cfg.rank_hist.v_mode = c.at("v_mode").get<std::string>();
      if (c.contains("conv_tol")) cfg.rank_hist.conv_tol = c.at("conv_tol").get<double>();
      if (c.contains("conv_window")) cfg.rank_hist.conv_window = c.at("conv_window").get<int>();
      if (cfg.rank_hist.runs < 1 || !(cfg.rank_hist.conv_tol > 0.0) ||
          cfg.rank_hist.conv_window < 1)
        bad_config("rank_hist needs runs >= 1, conv_tol > 0, conv_window >= 1");
      if (cfg.rank_hist.v_mode != "identity" && cfg.rank_hist.v_mode != "random" &&
          cfg.rank_hist.v_mode != "gaussian")
        bad_config("rank_hist.v_mode must be 'identity', 'random' or 'gaussian'");
    }
    if (j.contains("meanfield")) {
      const auto& c = j.at("meanfield");
      if (c.contains("n_values")) {
        cfg.meanfield.n_values.clear();
        for (const auto& n : c.at("n_values")) cfg.meanfield.n_values.push_back(n.get<int>());
      }
      if (c.contains("reference_n")) cfg.meanfield.reference_n = c.at("reference_n").get<int>();
      if (c.contains("w2_subsample")) cfg.meanfield.w2_subsample = c.at("w2_subsample").get<int>();
      if (c.contains("alpha0")) cfg.meanfield.alpha0 = parse_vector(c.at("alpha0"), "alpha0");
      if (c.contains("sigma0")) cfg.meanfield.sigma0 = parse_matrix(c.at("sigma0"), "sigma0");
    }
    if (j.contains("run")) {
      const auto& c = j.at("run").at("initial");
      const std::string type = c.at("type").get<std::string>();
      if (type == "gaussian") {
        cfg.initial_gaussian.emplace(parse_vector(c.at("alpha"), "alpha"),
                                     parse_matrix(c.at("sigma"), "sigma"));
      } else if (type == "particles") {
        const Matrix t = parse_matrix(c.at("tokens"), "tokens");
        std::vector<Vector> tokens(t.rows());
        for (Eigen::Index i = 0; i < t.rows(); ++i) tokens[i] = t.row(i).transpose();
        std::optional<std::vector<double>> positions;
        if (c.contains("positions")) {
          const Vector p = parse_vector(c.at("positions"), "positions");
          positions.emplace(p.data(), p.data() + p.size());
        }
        cfg.initial_particles.emplace(std::move(tokens), std::move(positions));
      } else {
        bad_config("run.initial.type must be 'gaussian' or 'particles'");
      }
    }
  } catch (const json::exception& e) {
    bad_config(std::string("config structure: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::ConfigError) throw;
    bad_config(e.what());
  }
  return cfg;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::ConfigError, "cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void parallel_for(int n, unsigned threads, const std::function<void(int)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max(n, 1)));
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace attnflow
