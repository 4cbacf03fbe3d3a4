#include "mglmm/count_family.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>

namespace mglmm {

namespace {

constexpr int kFactTableSize = 20001;

const std::vector<double>& log_fact_table() {
  static const std::vector<double> table = [] {
    std::vector<double> t(kFactTableSize);
    t[0] = 0.0;
    for (int i = 1; i < kFactTableSize; ++i) t[i] = t[i - 1] + std::log(double(i));
    return t;
  }();
  return table;
}

const std::vector<double>& log_int_table() {
  static const std::vector<double> table = [] {
    std::vector<double> t(kFactTableSize);
    t[0] = -std::numeric_limits<double>::infinity();
    for (int i = 1; i < kFactTableSize; ++i) t[i] = std::log(double(i));
    return t;
  }();
  return table;
}

inline double log_int(int y) {
  return y < kFactTableSize ? log_int_table()[y] : std::log(double(y));
}

void check_positive(double v, const char* what) {
  if (!(v > 0) || !std::isfinite(v))
    throw DomainError(std::string(what) + " must be positive and finite");
}

// Sum of log((phi + j) / (phi + mu)) for j < y. Exact for moderate y, which
// keeps the large-phi limit accurate.
double nb_log_ratio_sum(int y, double phi, double mu) {
  if (y <= 2000) {
    double s = 0;
    const double denom = phi + mu;
    for (int j = 0; j < y; ++j) s += std::log1p((j - mu) / denom);
    return s;
  }
  return std::lgamma(y + phi) - std::lgamma(phi) - y * std::log(phi + mu);
}

double nb_digamma_diff(int y, double phi) {
  if (y <= 2000) {
    double s = 0;
    for (int j = 0; j < y; ++j) s += 1.0 / (phi + j);
    return s;
  }
  return boost::math::digamma(y + phi) - boost::math::digamma(phi);
}

EtaDerivs poisson_derivs(int y, double eta, DerivOrder order) {
  EtaDerivs d;
  const double mu = std::exp(eta);
  d.value = y * eta - mu - log_factorial(y);
  if (order == DerivOrder::Value) return d;
  d.d1 = y - mu;
  d.d2 = -mu;
  d.d3 = -mu;
  return d;
}

EtaDerivs nb2_derivs(int y, double eta, double log_phi, DerivOrder order) {
  const double mu = std::exp(eta);
  // Beyond this phi every NB-minus-Poisson term, of order (y + mu)^2 / phi,
  // is below double resolution; the Poisson limit avoids overflow in phi.
  const double scale = 1.0 + y + mu;
  if (log_phi > 46.0 + 2.0 * std::log(scale)) return poisson_derivs(y, eta, order);
  EtaDerivs d;
  const double phi = std::exp(log_phi);
  const double pm = phi + mu;
  d.value = nb_log_ratio_sum(y, phi, mu) + y * eta - log_factorial(y) -
            phi * std::log1p(mu / phi);
  if (order == DerivOrder::Value) return d;
  // Ratio form: q = phi / (phi + mu), r = mu / (phi + mu), both in (0, 1).
  const double q = phi / pm, r = mu / pm;
  const double ypm = (y + phi) / pm;
  d.d1 = q * (y - mu);
  d.d2 = -mu * q * ypm;
  if (order == DerivOrder::Inner) return d;
  d.d3 = -mu * q * ypm * (q - r);
  const double dl_dphi = nb_digamma_diff(y, phi) - std::log1p(mu / phi) + (mu - y) / pm;
  d.da = phi * dl_dphi;
  d.d1a = q * r * (y - mu);
  d.d2a = -q * r * (y * r - y * q + 2.0 * mu * q);
  return d;
}

// Derivatives along eta at fixed nu, and along nu at fixed eta, of
//   l = y t + nu s_y - K(t, nu),  with t = log(lambda) solving k10(t, nu) = mu.
// With A = dt/deta = mu / V the eta-derivatives only need k10..k40; the nu
// derivatives use dt/dnu = -k11 / V and the joint cumulants k21, k31.
EtaDerivs cmp_derivs(int y, double eta, double log_nu, DerivOrder order,
                     const CmpSeriesControl& ctrl) {
  EtaDerivs d;
  const double mu = std::exp(eta);
  const double nu = std::exp(log_nu);
  const int cum_order = order == DerivOrder::Full ? 4 : (order == DerivOrder::Inner ? 3 : 2);
  double t = 0;
  const CmpCumulants c = cmp_solve(mu, nu, cum_order, ctrl, &t);
  const double s_y = -log_factorial(y);
  d.value = y * t + nu * s_y - c.log_z;
  if (order == DerivOrder::Value) return d;

  const double m = c.mean;
  const double V = c.var;
  const double r = y - m;
  const double A = m / V;
  const double A1 = A - A * A * c.k30 / V;
  d.d1 = r * A;
  d.d2 = -m * A + r * A1;
  if (order == DerivOrder::Inner) return d;

  const double A3 = A * A * A;
  const double A2 = A1 - 2.0 * A * A1 * c.k30 / V - A3 * c.k40 / V +
                    A3 * c.k30 * c.k30 / (V * V);
  d.d3 = -m * (A + 2.0 * A1) + r * A2;

  const double tau = -c.k11 / V;             // dt/dnu at fixed eta
  const double V_nu = tau * c.k30 + c.k21;   // dV/dnu
  const double k3_nu = tau * c.k40 + c.k31;  // dk30/dnu
  const double A_nu = -A * V_nu / V;
  const double A1_nu = A_nu - (2.0 * A * A_nu * c.k30 / V + A * A * k3_nu / V -
                               A * A * c.k30 * V_nu / (V * V));
  d.da = nu * (r * tau + s_y - c.mean_s);
  d.d1a = nu * (r * A_nu);
  d.d2a = nu * (-m * A_nu + r * A1_nu);
  return d;
}

}  // namespace

std::string Family::name() const {
  switch (kind) {
    case FamilyKind::Poisson: return "poisson";
    case FamilyKind::NegBin2: return "nb";
    case FamilyKind::ComPoissonMu: return "cmp";
  }
  return "unknown";
}

std::string Family::dispersion_symbol() const {
  switch (kind) {
    case FamilyKind::NegBin2: return "phi";
    case FamilyKind::ComPoissonMu: return "nu";
    default: return "";
  }
}

Family Family::parse(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "poisson") return {FamilyKind::Poisson};
  if (s == "nb" || s == "nb2" || s == "negbin" || s == "negbin2" || s == "negative_binomial")
    return {FamilyKind::NegBin2};
  if (s == "cmp" || s == "compoisson" || s == "com-poisson" || s == "com_poisson")
    return {FamilyKind::ComPoissonMu};
  throw std::invalid_argument("unknown family '" + std::string(text) + "'");
}

double log_factorial(int y) {
  if (y < 0) throw DomainError("log_factorial of a negative integer");
  return y < kFactTableSize ? log_fact_table()[y] : std::lgamma(y + 1.0);
}

CmpCumulants cmp_cumulants(double log_lambda, double nu, int order,
                           const CmpSeriesControl& ctrl) {
  if (!(nu > 0) || !std::isfinite(nu) || !std::isfinite(log_lambda))
    throw DomainError("CMP parameters must be finite with nu > 0");

  // Terms are summed outward from the mode floor(lambda^(1/nu)), which is the
  // running maximum, so each term is exp(logT - logT_mode) <= 1 and the sum
  // never needs rescaling.
  const double mode_real = std::exp(log_lambda / nu);
  if (mode_real > ctrl.max_terms)
    throw SeriesError("CMP series: mode beyond max_terms (lambda too large for nu)");
  const int mode = static_cast<int>(std::floor(mode_real));
  const double log_t_mode = mode * log_lambda - nu * log_factorial(mode);
  const double log_tol = std::log(ctrl.rel_tol);

  // Shifted power sums: d = y - mode, e = s_y - s_mode with s_y = -log(y!).
  double s0 = 1.0, sd1 = 0, sd2 = 0, sd3 = 0, sd4 = 0;
  double se1 = 0, sde = 0, sd2e = 0, sd3e = 0;
  int terms = 1;
  const double s_mode = -log_factorial(mode);

  auto accumulate = [&](int y, double w) {
    const double dd = y - mode;
    const double e = -log_factorial(y) - s_mode;
    const double wd = w * dd;
    s0 += w;
    sd1 += wd;
    sd2 += wd * dd;
    if (order >= 3) {
      sd3 += wd * dd * dd;
      se1 += w * e;
      sde += wd * e;
    }
    if (order >= 4) {
      sd4 += wd * dd * dd * dd;
      sd2e += wd * dd * e;
      sd3e += wd * dd * dd * e;
    }
  };

  // Right tail. The ratio of consecutive terms lambda / y^nu decreases in y,
  // so once it is below one the remaining tail is bounded by a geometric
  // series; stop when both the term and that bound are negligible.
  {
    double log_t = log_t_mode;
    for (int y = mode + 1;; ++y) {
      if (terms >= ctrl.max_terms)
        throw SeriesError("CMP series did not converge within max_terms");
      const double log_ratio = log_lambda - nu * log_int(y);
      log_t += log_ratio;
      const double rel = log_t - log_t_mode - std::log(s0);
      accumulate(y, std::exp(log_t - log_t_mode));
      ++terms;
      if (log_ratio < 0 && rel < log_tol) {
        const double ratio = std::exp(log_ratio);
        const double tail_rel = rel + log_ratio - std::log1p(-ratio);
        if (tail_rel < log_tol) break;
      }
    }
  }
  // Left tail, down to zero.
  {
    double log_t = log_t_mode;
    for (int y = mode - 1; y >= 0; --y) {
      if (terms >= ctrl.max_terms)
        throw SeriesError("CMP series did not converge within max_terms");
      log_t -= log_lambda - nu * log_int(y + 1);
      accumulate(y, std::exp(log_t - log_t_mode));
      ++terms;
      if (log_t - log_t_mode - std::log(s0) < log_tol) break;
    }
  }

  CmpCumulants c;
  c.terms = terms;
  c.log_z = log_t_mode + std::log(s0);
  const double a1 = sd1 / s0;
  const double a2 = sd2 / s0;
  c.mean = mode + a1;
  c.var = std::max(a2 - a1 * a1, std::numeric_limits<double>::min());
  if (order >= 3) {
    const double a3 = sd3 / s0;
    const double eb = se1 / s0;
    const double de = sde / s0;
    c.k30 = a3 - 3.0 * a1 * a2 + 2.0 * a1 * a1 * a1;
    c.mean_s = s_mode + eb;
    c.k11 = de - a1 * eb;
    if (order >= 4) {
      const double a4 = sd4 / s0;
      const double d2e = sd2e / s0;
      const double d3e = sd3e / s0;
      const double mu4 = a4 - 4.0 * a1 * a3 + 6.0 * a1 * a1 * a2 - 3.0 * a1 * a1 * a1 * a1;
      c.k40 = mu4 - 3.0 * c.var * c.var;
      // E[(d-a1)^2 e] - E[e] * var
      c.k21 = d2e - 2.0 * a1 * de + a1 * a1 * eb - eb * c.var;
      // E[(d-a1)^3 (e-E e)] - 3 var cov
      const double m31 = d3e - 3.0 * a1 * d2e + 3.0 * a1 * a1 * de - a1 * a1 * a1 * eb - eb * c.k30;
      c.k31 = m31 - 3.0 * c.var * c.k11;
    }
  }
  return c;
}

double cmp_log_norm_const(double lambda, double nu, const CmpSeriesControl& ctrl) {
  check_positive(lambda, "lambda");
  check_positive(nu, "nu");
  return cmp_cumulants(std::log(lambda), nu, 2, ctrl).log_z;
}

CmpCumulants cmp_solve(double mu, double nu, int order, const CmpSeriesControl& ctrl,
                       double* log_lambda_out) {
  check_positive(mu, "mu");
  check_positive(nu, "nu");
  const double log_mu = std::log(mu);
  // Newton on log(mean) - log(mu) in t = log(lambda), started from the
  // asymptotic mean approximation lambda ~ (mu + (nu - 1) / (2 nu))^nu.
  const double base = mu + (nu - 1.0) / (2.0 * nu);
  double t = std::max(nu * std::log(std::max(base, 1e-300)), std::log(1e-8));
  if (base <= 0) t = std::log(1e-8);
  double prev_abs_f = std::numeric_limits<double>::infinity();
  double step = 0;
  for (int it = 0; it < 100; ++it) {
    CmpCumulants c;
    try {
      c = cmp_cumulants(t, nu, order, ctrl);
    } catch (const SeriesError&) {
      if (it == 0) throw;
      step *= 0.5;
      t -= step;
      continue;
    }
    const double f = std::log(c.mean) - log_mu;
    const double abs_f = std::abs(f);
    if (abs_f <= 1e-14) {
      if (log_lambda_out) *log_lambda_out = t;
      return c;
    }
    if (abs_f > prev_abs_f && it > 0) {
      step *= 0.5;
      t -= step;
      continue;
    }
    step = -f * c.mean / c.var;
    prev_abs_f = abs_f;
    if (std::abs(step) < 1e-15 * std::max(1.0, std::abs(t))) {
      if (abs_f > 1e-10) break;
      if (log_lambda_out) *log_lambda_out = t;
      return c;
    }
    t += step;
  }
  throw SeriesError("CMP rate solver did not converge (mu=" + std::to_string(mu) +
                    ", nu=" + std::to_string(nu) + ")");
}

double cmp_solve_rate(double mu, double nu, const CmpSeriesControl& ctrl) {
  double t = 0;
  cmp_solve(mu, nu, 2, ctrl, &t);
  return std::exp(t);
}

EtaDerivs eta_derivs(Family family, int y, double eta, double log_disp,
                     DerivOrder order, const CmpSeriesControl& ctrl) {
  if (y < 0) throw DomainError("count must be nonnegative");
  if (!std::isfinite(eta)) throw DomainError("linear predictor must be finite");
  switch (family.kind) {
    case FamilyKind::Poisson: return poisson_derivs(y, eta, order);
    case FamilyKind::NegBin2:
      if (!std::isfinite(log_disp)) throw DomainError("phi must be positive and finite");
      return nb2_derivs(y, eta, log_disp, order);
    case FamilyKind::ComPoissonMu:
      if (!std::isfinite(log_disp)) throw DomainError("nu must be positive and finite");
      return cmp_derivs(y, eta, log_disp, order, ctrl);
  }
  return {};
}

double log_pmf(Family family, int y, double mu, std::optional<double> disp,
               const CmpSeriesControl& ctrl) {
  check_positive(mu, "mu");
  if (family.has_dispersion() != disp.has_value())
    throw DomainError("dispersion must be supplied iff the family has one");
  double log_disp = 0;
  if (disp) {
    check_positive(*disp, family.dispersion_symbol().c_str());
    log_disp = std::log(*disp);
  }
  return eta_derivs(family, y, std::log(mu), log_disp, DerivOrder::Value, ctrl).value;
}

int sample(Family family, double mu, std::optional<double> disp, Rng& rng,
           const CmpSeriesControl& ctrl) {
  check_positive(mu, "mu");
  if (family.has_dispersion() != disp.has_value())
    throw DomainError("dispersion must be supplied iff the family has one");
  switch (family.kind) {
    case FamilyKind::Poisson: {
      std::poisson_distribution<int> pois(mu);
      return pois(rng);
    }
    case FamilyKind::NegBin2: {
      // Gamma-Poisson mixture: rate ~ Gamma(shape phi, scale mu/phi).
      check_positive(*disp, "phi");
      std::gamma_distribution<double> gam(*disp, mu / *disp);
      const double rate = gam(rng);
      if (rate <= 0) return 0;
      std::poisson_distribution<int> pois(rate);
      return pois(rng);
    }
    case FamilyKind::ComPoissonMu: {
      // CDF inversion from zero over the truncated series.
      const double nu = *disp;
      check_positive(nu, "nu");
      double t = 0;
      const CmpCumulants c = cmp_solve(mu, nu, 2, ctrl, &t);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      const double u = unif(rng);
      double cdf = 0;
      double log_p = -c.log_z;  // y = 0
      int y = 0;
      for (; y < ctrl.max_terms; ++y) {
        if (y > 0) log_p += t - nu * log_int(y);
        cdf += std::exp(log_p);
        if (cdf >= u) return y;
        if (y > c.mean && std::exp(log_p) < 1e-300) break;
      }
      // Remaining mass is below the series tolerance; return the last count.
      return y;
    }
  }
  return 0;
}

}  // namespace mglmm
