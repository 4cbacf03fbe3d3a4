#pragma once

// Outer maximum-likelihood fitting over the flat unconstrained vector:
// initial values, chained quasi-Newton rounds, optional subsample warm start,
// and observed-information standard errors.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mglmm/laplace.hpp"
#include "mglmm/model.hpp"
#include "mglmm/optim.hpp"

namespace mglmm {

enum class Optimizer { QnA, QnB };  // trust-region BFGS, line-search BFGS

std::string optimizer_name(Optimizer o);
/// Comma-separated list of "A"/"B" (case-insensitive), e.g. "A,B,A,A".
std::vector<Optimizer> parse_schedule(const std::string& text);
std::string schedule_string(const std::vector<Optimizer>& schedule);

enum class GradientMode { Analytic, FiniteDifference };

struct FitControl {
  std::vector<Optimizer> schedule{Optimizer::QnA, Optimizer::QnB, Optimizer::QnA, Optimizer::QnA};
  GradientMode gradient = GradientMode::Analytic;
  double fd_rel = 1e-5;  // FD step max(fd_min, fd_rel * |theta|)
  double fd_min = 1e-5;
  double outer_tol = 1e-6;
  int max_iter = 500;
  bool srs = false;
  int srs_size = 300;
  unsigned long long srs_seed = 2390;
  int threads = 1;
  bool compute_se = true;
  LaplaceControl laplace;
  CmpSeriesControl series;
  std::optional<ParameterVector> init;
};

struct TraceRow {
  std::string stage;  // "srs" or "full"
  int round = 0;
  Optimizer optimizer = Optimizer::QnA;
  int iterations = 0;
  int evaluations = 0;
  double loglik = 0;
  double grad_inf_norm = 0;
  bool converged = false;
  std::string message;
};

/// A parameter on its reporting scale: beta, phi/nu, sigma (sd) or rho.
struct NaturalParam {
  std::string name;
  std::string kind;  // "beta", "phi", "nu", "sigma", "rho"
  int response = -1;
  int response2 = -1;  // second index for rho
  double estimate = 0;
  std::optional<double> se;
  bool fixed = false;
};

/// Wald covariance from the Hessian of a negative log-likelihood. When the
/// Hessian is not positive definite the coordinates implicated by its
/// non-positive eigendirections get missing SEs and the covariance is the
/// pseudo-inverse on the remaining subspace (NaN rows/columns for missing).
struct HessianInverse {
  Eigen::MatrixXd vcov;
  std::vector<std::optional<double>> se;
  bool positive_definite = false;
};

HessianInverse covariance_from_hessian(const Eigen::MatrixXd& hessian);

struct FitResult {
  ModelSpec spec;
  ParameterVector params;
  Eigen::VectorXd estimates;  // flat, unconstrained scale
  std::vector<std::string> names;
  std::vector<std::optional<double>> se;  // flat scale
  Eigen::MatrixXd vcov;
  bool hessian_pd = false;
  std::vector<NaturalParam> natural;
  double loglik = 0;
  int np = 0;
  int n_subjects = 0;
  bool converged = false;
  double grad_inf_norm = 0;
  std::string message;
  std::vector<TraceRow> trace;
  LaplaceState state;
};

/// Per-response Poisson GLM (IRLS) for beta, link-scale excess variance for
/// the standard deviations, zero correlations, unit dispersion.
ParameterVector initial_values(const ModelSpec& spec, const Dataset& data);

FitResult fit(const ModelSpec& spec, const Dataset& data, const FitControl& ctrl = {});

/// Negative marginal log-likelihood Hessian at `at` and its inverse.
HessianInverse observed_information_se(const MixedModel& model, const Eigen::VectorXd& at,
                                       const FitControl& ctrl, const LaplaceState* warm = nullptr);

/// Natural-scale parameters with delta-method SEs; fixed coordinates are
/// reported with `fixed` set and no SE.
std::vector<NaturalParam> natural_parameters(const ParameterLayout& layout, const Eigen::VectorXd& flat,
                                             const Eigen::MatrixXd& vcov,
                                             const std::vector<std::optional<double>>& se);

/// Rows of `data` drawn without replacement (sorted), reproducible from seed.
std::vector<int> srs_indices(int n, int size, unsigned long long seed);

}  // namespace mglmm
