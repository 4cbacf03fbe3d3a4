#pragma once

// Conditional count families used by the mixed model: Poisson, negative
// binomial type II (variance mu + mu^2/phi) and the mean-parameterized
// Conway-Maxwell-Poisson distribution.

#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mglmm {

enum class FamilyKind { Poisson, NegBin2, ComPoissonMu };

struct Family {
  FamilyKind kind = FamilyKind::Poisson;

  bool has_dispersion() const { return kind != FamilyKind::Poisson; }
  /// "poisson", "nb" or "cmp".
  std::string name() const;
  /// Symbol used for the dispersion parameter in reports ("phi" / "nu").
  std::string dispersion_symbol() const;
  /// Accepts the short names above plus a few long aliases.
  static Family parse(std::string_view text);

  friend bool operator==(const Family&, const Family&) = default;
};

/// Truncation control for the CMP normalizing series.
struct CmpSeriesControl {
  double rel_tol = 1e-12;
  int max_terms = 10000;
};

/// Thrown when the CMP series or its rate solver does not converge.
class SeriesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for invalid distribution arguments (nonpositive mean, missing
/// or superfluous dispersion, ...).
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

double log_pmf(Family family, int y, double mu, std::optional<double> disp,
               const CmpSeriesControl& ctrl = {});

/// log sum_{y>=0} lambda^y / (y!)^nu.
double cmp_log_norm_const(double lambda, double nu,
                          const CmpSeriesControl& ctrl = {});

/// Rate lambda of CMP(lambda, nu) whose mean equals mu.
double cmp_solve_rate(double mu, double nu, const CmpSeriesControl& ctrl = {});

/// Cumulants of the CMP(exp(log_lambda), nu) law. With S = -log(Y!), the
/// log normalizing constant is the cumulant generating function of (Y, S),
/// so its partial derivatives in (log_lambda, nu) are the joint cumulants
/// stored here.
struct CmpCumulants {
  double log_z = 0;
  double mean = 0;      // k10
  double var = 0;       // k20
  double k30 = 0;
  double k40 = 0;
  double mean_s = 0;    // k01
  double k11 = 0;
  double k21 = 0;
  double k31 = 0;
  int terms = 0;
};

/// `order` selects how much is accumulated: 2 gives log_z/mean/var, 3 adds
/// k30 and the (Y,S) covariance, 4 adds everything.
CmpCumulants cmp_cumulants(double log_lambda, double nu, int order,
                           const CmpSeriesControl& ctrl = {});

/// Solves for log(lambda) and returns the cumulants at the solution.
CmpCumulants cmp_solve(double mu, double nu, int order,
                       const CmpSeriesControl& ctrl, double* log_lambda_out);

/// Derivatives of log f(y | mu = exp(eta), disp = exp(log_disp)) with respect
/// to the linear predictor and the log-dispersion. Mixed derivatives are
/// zero for Poisson.
struct EtaDerivs {
  double value = 0;
  double d1 = 0;   // d/deta
  double d2 = 0;   // d2/deta2
  double d3 = 0;   // d3/deta3
  double da = 0;   // d/dlog_disp
  double d1a = 0;  // d2/deta dlog_disp
  double d2a = 0;  // d3/deta2 dlog_disp
};

enum class DerivOrder {
  Value,  // value only
  Inner,  // value, d1, d2
  Full,   // everything
};

EtaDerivs eta_derivs(Family family, int y, double eta, double log_disp,
                     DerivOrder order, const CmpSeriesControl& ctrl = {});

using Rng = std::mt19937_64;

int sample(Family family, double mu, std::optional<double> disp, Rng& rng,
           const CmpSeriesControl& ctrl = {});

/// log(y!) from a cached table (lgamma beyond it).
double log_factorial(int y);

}  // namespace mglmm
