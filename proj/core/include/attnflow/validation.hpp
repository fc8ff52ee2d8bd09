#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "attnflow/attention.hpp"

namespace attnflow {

struct CheckResult {
  std::string name;
  bool passed = false;
  double metric = 0.0;     // worst measured residual / rate for the check
  double threshold = 0.0;  // pass bound the metric was held against
  std::string note;
};

struct ValidationReport {
  std::vector<CheckResult> checks;
  bool all_passed() const;
  std::string to_json() const;
  std::string summary() const;  // one line per check
};

struct ValidationOptions {
  std::uint64_t seed = 0x5eedf10aULL;
  unsigned threads = 0;
  std::filesystem::path scratch_dir = std::filesystem::temp_directory_path();
};

using GaussianFieldFn =
    std::function<AffineField(const AttentionParams&, const GaussianMeasure&)>;

// Closed-form / oracle parity checks. Tolerances are fixed inside each check.
CheckResult check_core_linalg_properties(std::uint64_t seed);
CheckResult check_dim1_softmax_closed_form();
CheckResult check_dim1_blowup_time();
CheckResult check_commuting_closed_form(std::uint64_t seed);
CheckResult check_rank_histograms(std::uint64_t seed, unsigned threads);
CheckResult check_l2_global_existence(std::uint64_t seed, unsigned threads);
CheckResult check_eot_gaussian_closed_form(std::uint64_t seed);
CheckResult check_sinkhorn_bistochasticity(std::uint64_t seed);
CheckResult check_meanfield_consistency(std::uint64_t seed, unsigned threads);
CheckResult check_masked_invariants(std::uint64_t seed);
/// override_field lets tests inject a corrupted closed form (mutation check);
/// quick restricts the sweep to a few Softmax configs for fast meta-tests.
CheckResult check_gaussian_velocity_parity(std::uint64_t seed, GaussianFieldFn override_field = {},
                                           bool quick = false);
CheckResult check_energy_monotonicity(std::uint64_t seed);
CheckResult check_softmax_energy_mc(std::uint64_t seed);
CheckResult check_determinism(const std::filesystem::path& scratch_dir);

// Property checks from the module invariants.
CheckResult check_a_only_dependence(std::uint64_t seed);
CheckResult check_velocity_boundedness(std::uint64_t seed);
CheckResult check_linear_eps_expansion(std::uint64_t seed);
CheckResult check_wasserstein_metric_properties(std::uint64_t seed);
CheckResult check_eot_eps_monotonicity();
CheckResult check_rank1_preservation(std::uint64_t seed);
CheckResult check_stability_direction(std::uint64_t seed);
/// Reports Monte-Carlo residuals of both candidate C-matrix forms of the
/// Gaussian Sinkhorn field on a non-normal A.
CheckResult check_sinkhorn_c_adjudication(std::uint64_t seed);

ValidationReport run_validation_suite(const ValidationOptions& opts = {});

}  // namespace attnflow
