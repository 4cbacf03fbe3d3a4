#pragma once

// Fit statistics, Wald intervals, likelihood-ratio tests, correlation
// reporting and the descriptive dispersion indices, plus table writers.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mglmm/fit.hpp"

namespace mglmm {

struct FitStats {
  double loglik = 0;
  double aic = 0;
  double bic = 0;
  int np = 0;
  int n = 0;
};

/// BIC uses the number of subjects as the sample size.
FitStats fit_stats(double loglik, int np, int n_subjects);
FitStats fit_stats(const FitResult& result);

struct LrtResult {
  double stat = 0;
  int df = 0;
  double p = 1;
};

/// stat = 2 (l_full - l_reduced), df = np_full - np_reduced (must be >= 0),
/// p from the chi-square upper tail (1 when df = 0).
LrtResult lrt(double loglik_full, int np_full, double loglik_reduced, int np_reduced);

/// True when every model in `reduced` is a restriction of `full`: same
/// responses and designs, and each constraint of `full` also holds in
/// `reduced`. A Poisson model is nested in a COM-Poisson model whose
/// dispersion is free or fixed at 1.
bool is_nested(const ModelSpec& reduced, const ModelSpec& full);

/// Throws InputError when `reduced` is not nested in `full`.
LrtResult lrt(const FitResult& full, const FitResult& reduced);

struct WaldInterval {
  std::string name;
  double estimate = 0;
  std::optional<double> se;
  std::optional<double> lower, upper;
  bool fixed = false;
};

double normal_quantile(double p);
WaldInterval wald_interval(std::string name, double estimate, std::optional<double> se, double level = 0.95);
std::vector<WaldInterval> wald_ci(const FitResult& result, double level = 0.95);

/// Whether the Wald interval at `level` excludes zero; false without an SE.
bool excludes_zero(double estimate, std::optional<double> se, double level = 0.95);

struct CorrelationCell {
  double estimate = 0;
  std::optional<double> se;
  bool significant = false;
  bool fixed = false;
};

struct CorrelationReport {
  std::vector<std::string> names;
  std::vector<std::vector<CorrelationCell>> cells;  // k x k, diagonal = 1
};

CorrelationReport correlation_report(const FitResult& result, double level = 0.95);

/// "0.78(0.09)*" style; SEs below .005 print as "(<.01)".
std::string format_correlation_cell(const CorrelationCell& cell);

/// Sample variance (n - 1 denominator) over the sample mean; 0 for a
/// constant column with positive mean. Throws when the mean is zero.
double dispersion_index(const Eigen::VectorXi& y);
double sample_variance(const Eigen::VectorXi& y);

/// (sqrt m)' S (sqrt m) / (m' m), m the column means, S the sample covariance.
double gdi_value(const Eigen::MatrixXi& Y);

struct GdiResult {
  double gdi = 0;
  double se = 0;
  int resamples = 0;
};

/// SE from a nonparametric row bootstrap; resample b uses the stream
/// derive_seed(seed, b), so the result does not depend on threads.
GdiResult gdi(const Eigen::MatrixXi& Y, int resamples = 1000, unsigned long long seed = 2390, int threads = 1);

// Table writers. CSV outputs are deterministic given their inputs.

std::string format_number(double v, int digits = 10);
std::string estimates_csv(const FitResult& result, double level = 0.95);
std::string unconstrained_csv(const FitResult& result);
/// One row per response: estimate and SE of the dispersion parameter.
std::string dispersion_csv(const FitResult& result);
std::string correlation_csv(const CorrelationReport& report);
std::string correlation_text(const CorrelationReport& report);
std::string trace_csv(const std::vector<TraceRow>& trace);

struct FitSummary {
  std::string label;
  ModelSpec spec;
  double loglik = 0;
  int np = 0;
  int n = 0;
  bool converged = false;
};

FitSummary summarize(const FitResult& result, std::string label);
std::string fitstats_csv(const std::vector<FitSummary>& rows);
std::string fitstats_text(const std::vector<FitSummary>& rows);

struct Comparison {
  std::vector<FitSummary> rows;  // sorted by AIC, ties by np ascending
  struct Test {
    std::string full, reduced;
    LrtResult result;
  };
  std::vector<Test> tests;  // every nested pair
};

/// Requires at least two models.
Comparison compare(std::vector<FitSummary> fits);
std::string comparison_text(const Comparison& c);
std::string lrt_csv(const Comparison& c);

}  // namespace mglmm
