#pragma once

// Bivariate intercept-only simulation scenarios: data generation, replicate
// fitting with exclusion rules, and bias/SE/coverage summaries.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mglmm/fit.hpp"

namespace mglmm {

struct ScenarioConfig {
  Family family;
  int n = 1000;
  double rho = 0;
  Eigen::Vector2d beta0{std::log(7.0), std::log(1.5)};
  Eigen::Vector2d sigma2{0.3, 0.15};
  double disp = 1.0;  // phi (NB) or nu (CMP); unused for Poisson
  int target_valid = 100;
  int max_replicates = 300;
  unsigned long long seed = 2390;

  /// Defaults for a family: phi = 1, nu = 0.7, replicate cap 300/600/400
  /// for Poisson/NB/CMP.
  static ScenarioConfig standard(Family family, int n, double rho);

  void validate() const;
  ModelSpec model_spec() const;
};

/// Named true values on the reporting scale, in a fixed order: beta0_1,
/// beta0_2, sigma_1, sigma_2 (standard deviations), rho, then phi_r or nu_r.
struct TrueParam {
  std::string name;
  double value = 0;
};
std::vector<TrueParam> true_parameters(const ScenarioConfig& config);

/// b_i ~ N(0, Sigma), y_ir ~ family(exp(beta0_r + b_ir)); reproducible.
Dataset generate(const ScenarioConfig& config, unsigned long long seed);

struct ExclusionRules {
  double extreme_estimate = 10;  // |unconstrained estimate|
  double extreme_se = 10;        // unconstrained SE
  double max_phi = 5;
  double max_nu = 4;
  double max_rho_se = 2;
};

struct ReplicateResult {
  int index = 0;
  unsigned long long seed = 0;
  bool converged = false;
  bool valid = false;
  std::string reason;  // empty when valid
  double loglik = 0;
  std::vector<double> estimate;              // per true parameter
  std::vector<std::optional<double>> se;     // per true parameter
};

struct ParamSummary {
  std::string name;
  double truth = 0;
  double mean_estimate = 0;
  double bias = 0;
  double mean_se = 0;
  double band_lower = 0;  // bias - 1.96 mean SE
  double band_upper = 0;
  double coverage = 0;
  int used = 0;
};

struct ScenarioSummary {
  ScenarioConfig config;
  int generated = 0;
  int valid = 0;
  int excluded = 0;
  bool complete = false;  // target reached before the cap
  std::map<std::string, int> reasons;
  std::vector<ParamSummary> params;
  std::vector<ReplicateResult> replicates;
};

struct SimControl {
  FitControl fit;  // per-replicate fit settings (its threads should stay 1)
  ExclusionRules rules;
  int threads = 1;  // replicates run in parallel
};

/// Replicate j uses seed derive_seed(config.seed, j). Replicates are taken
/// in index order until the valid target or the cap, so the summary does
/// not depend on the thread count.
ScenarioSummary run_scenario(const ScenarioConfig& config, const SimControl& ctrl = {});

ReplicateResult run_replicate(const ScenarioConfig& config, int index, const SimControl& ctrl);

/// Long format: one row per parameter.
std::string summary_csv(const std::vector<ScenarioSummary>& cells);
std::string exclusions_csv(const std::vector<ScenarioSummary>& cells);
std::string replicates_csv(const std::vector<ScenarioSummary>& cells);

}  // namespace mglmm
