#include "mglmm/report.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "mglmm/parallel.hpp"

namespace mglmm {

FitStats fit_stats(double loglik, int np, int n_subjects) {
  FitStats s;
  s.loglik = loglik;
  s.np = np;
  s.n = n_subjects;
  s.aic = -2.0 * loglik + 2.0 * np;
  s.bic = -2.0 * loglik + np * std::log(static_cast<double>(n_subjects));
  return s;
}

FitStats fit_stats(const FitResult& result) { return fit_stats(result.loglik, result.np, result.n_subjects); }

LrtResult lrt(double loglik_full, int np_full, double loglik_reduced, int np_reduced) {
  if (np_full < np_reduced) throw InputError("lrt: the full model has fewer parameters than the reduced model");
  LrtResult r;
  r.stat = 2.0 * (loglik_full - loglik_reduced);
  r.df = np_full - np_reduced;
  if (r.df == 0) {
    r.p = 1.0;
  } else {
    const boost::math::chi_squared chi(r.df);
    r.p = r.stat <= 0 ? 1.0 : boost::math::cdf(boost::math::complement(chi, r.stat));
  }
  return r;
}

bool is_nested(const ModelSpec& reduced, const ModelSpec& full) {
  if (reduced.k() != full.k() || reduced.standardize != full.standardize) return false;
  for (int r = 0; r < full.k(); ++r) {
    const auto& a = reduced.responses[r];
    const auto& b = full.responses[r];
    if (a.name != b.name || a.intercept != b.intercept || a.covariates != b.covariates) return false;
  }
  const ConstraintSet& cr = reduced.constraints;
  const ConstraintSet& cf = full.constraints;
  if (cf.fix_rho_zero && !cr.fix_rho_zero) return false;
  if (cf.fixed_variance && cr.fixed_variance != cf.fixed_variance) return false;
  if (cf.shared_variance && !(cr.shared_variance || cr.fixed_variance)) return false;
  if (reduced.family == full.family) {
    if (cf.fixed_dispersion && cr.fixed_dispersion != cf.fixed_dispersion) return false;
    return true;
  }
  // Poisson is the COM-Poisson model at nu = 1, an interior point.
  return reduced.family.kind == FamilyKind::Poisson && full.family.kind == FamilyKind::ComPoissonMu &&
         (!cf.fixed_dispersion || *cf.fixed_dispersion == 1.0);
}

LrtResult lrt(const FitResult& full, const FitResult& reduced) {
  if (!is_nested(reduced.spec, full.spec)) throw InputError("lrt: models are not nested");
  return lrt(full.loglik, full.np, reduced.loglik, reduced.np);
}

double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

WaldInterval wald_interval(std::string name, double estimate, std::optional<double> se, double level) {
  WaldInterval w;
  w.name = std::move(name);
  w.estimate = estimate;
  w.se = se;
  if (se) {
    const double z = normal_quantile(0.5 + 0.5 * level);
    w.lower = estimate - z * *se;
    w.upper = estimate + z * *se;
  }
  return w;
}

std::vector<WaldInterval> wald_ci(const FitResult& result, double level) {
  std::vector<WaldInterval> out;
  for (const auto& p : result.natural) {
    WaldInterval w = wald_interval(p.name, p.estimate, p.fixed ? std::nullopt : p.se, level);
    w.fixed = p.fixed;
    out.push_back(std::move(w));
  }
  return out;
}

bool excludes_zero(double estimate, std::optional<double> se, double level) {
  if (!se) return false;
  const WaldInterval w = wald_interval("", estimate, se, level);
  return *w.lower > 0 || *w.upper < 0;
}

CorrelationReport correlation_report(const FitResult& result, double level) {
  CorrelationReport rep;
  const int k = result.spec.k();
  for (const auto& r : result.spec.responses) rep.names.push_back(r.name);
  rep.cells.assign(k, std::vector<CorrelationCell>(k));
  for (int i = 0; i < k; ++i) {
    rep.cells[i][i].estimate = 1.0;
    rep.cells[i][i].fixed = true;
  }
  for (const auto& p : result.natural) {
    if (p.kind != "rho") continue;
    CorrelationCell c;
    c.estimate = p.estimate;
    c.fixed = p.fixed;
    c.se = p.fixed ? std::nullopt : p.se;
    c.significant = !p.fixed && excludes_zero(p.estimate, c.se, level);
    rep.cells[p.response][p.response2] = c;
    rep.cells[p.response2][p.response] = c;
  }
  return rep;
}

std::string format_correlation_cell(const CorrelationCell& cell) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << cell.estimate;
  if (cell.fixed) return out.str();
  if (!cell.se) out << "(NA)";
  else if (*cell.se < 0.005) out << "(<.01)";
  else out << "(" << *cell.se << ")";
  if (cell.significant) out << "*";
  return out.str();
}

double sample_variance(const Eigen::VectorXi& y) {
  const Eigen::Index n = y.size();
  if (n < 2) throw InputError("variance: at least two observations are required");
  const Eigen::ArrayXd v = y.cast<double>().array();
  return (v - v.mean()).square().sum() / static_cast<double>(n - 1);
}

double dispersion_index(const Eigen::VectorXi& y) {
  const double var = sample_variance(y);
  const double mean = y.cast<double>().mean();
  if (!(mean > 0)) throw InputError("dispersion index: the sample mean is zero");
  return var / mean;
}

double gdi_value(const Eigen::MatrixXi& Y) {
  const Eigen::Index n = Y.rows();
  if (n < 2) throw InputError("gdi: at least two observations are required");
  const Eigen::MatrixXd X = Y.cast<double>();
  const Eigen::VectorXd m = X.colwise().mean();
  if (!(m.squaredNorm() > 0)) throw InputError("gdi: the mean vector is zero");
  const Eigen::MatrixXd C = X.rowwise() - m.transpose();
  const Eigen::MatrixXd S = C.transpose() * C / static_cast<double>(n - 1);
  const Eigen::VectorXd s = m.array().sqrt().matrix();
  return s.dot(S * s) / m.squaredNorm();
}

GdiResult gdi(const Eigen::MatrixXi& Y, int resamples, unsigned long long seed, int threads) {
  GdiResult out;
  out.gdi = gdi_value(Y);
  out.resamples = resamples;
  if (resamples < 2) return out;
  const int n = static_cast<int>(Y.rows());
  std::vector<double> reps(resamples, std::nan(""));
  parallel_for(resamples, threads, [&](int b) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<unsigned long long>(b)));
    std::uniform_int_distribution<int> pick(0, n - 1);
    Eigen::MatrixXi Yb(n, Y.cols());
    for (int i = 0; i < n; ++i) Yb.row(i) = Y.row(pick(rng));
    try {
      reps[b] = gdi_value(Yb);
    } catch (const InputError&) {
      // all-zero resample: the index is undefined and the draw is dropped
    }
  });
  double sum = 0, sumsq = 0;
  int used = 0;
  for (double v : reps)
    if (std::isfinite(v)) {
      sum += v;
      ++used;
    }
  const double mean = used ? sum / used : 0;
  for (double v : reps)
    if (std::isfinite(v)) sumsq += (v - mean) * (v - mean);
  out.se = used > 1 ? std::sqrt(sumsq / (used - 1)) : 0;
  return out;
}

std::string format_number(double v, int digits) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  std::ostringstream out;
  out << std::setprecision(digits) << v;
  return out.str();
}

namespace {

std::string opt_number(const std::optional<double>& v) { return v ? format_number(*v) : "NA"; }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string estimates_csv(const FitResult& result, double level) {
  std::ostringstream out;
  out << "parameter,kind,estimate,se,lower,upper,fixed\n";
  const auto ci = wald_ci(result, level);
  for (std::size_t i = 0; i < ci.size(); ++i) {
    const auto& w = ci[i];
    out << csv_field(w.name) << "," << result.natural[i].kind << "," << format_number(w.estimate) << ","
        << opt_number(w.se) << "," << opt_number(w.lower) << "," << opt_number(w.upper) << ","
        << (w.fixed ? "true" : "false") << "\n";
  }
  return out.str();
}

std::string unconstrained_csv(const FitResult& result) {
  std::ostringstream out;
  out << "coordinate,estimate,se\n";
  for (std::size_t j = 0; j < result.names.size(); ++j)
    out << csv_field(result.names[j]) << "," << format_number(result.estimates(j)) << ","
        << opt_number(result.se[j]) << "\n";
  return out.str();
}

std::string dispersion_csv(const FitResult& result) {
  std::ostringstream out;
  out << "outcome,parameter,estimate,se,fixed\n";
  for (const auto& p : result.natural) {
    if (p.kind != "phi" && p.kind != "nu") continue;
    out << csv_field(result.spec.responses[p.response].name) << "," << p.kind << "," << format_number(p.estimate)
        << "," << opt_number(p.fixed ? std::nullopt : p.se) << "," << (p.fixed ? "true" : "false") << "\n";
  }
  return out.str();
}

std::string correlation_csv(const CorrelationReport& report) {
  std::ostringstream out;
  out << "response";
  for (const auto& n : report.names) out << "," << csv_field(n);
  out << "\n";
  for (std::size_t i = 0; i < report.names.size(); ++i) {
    out << csv_field(report.names[i]);
    for (std::size_t j = 0; j < report.names.size(); ++j) {
      out << ",";
      if (i == j) out << "1";
      else if (j > i) out << format_correlation_cell(report.cells[i][j]);
    }
    out << "\n";
  }
  return out.str();
}

std::string correlation_text(const CorrelationReport& report) {
  const std::size_t k = report.names.size();
  std::size_t w = 6;
  for (const auto& n : report.names) w = std::max(w, n.size());
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) w = std::max(w, format_correlation_cell(report.cells[i][j]).size());
  w += 2;
  std::ostringstream out;
  for (const auto& n : report.names) out << std::setw(static_cast<int>(w)) << n;
  out << "\n";
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      std::string cell;
      if (i == j) cell = "1";
      else if (j > i) cell = format_correlation_cell(report.cells[i][j]);
      out << std::setw(static_cast<int>(w)) << cell;
    }
    out << "  " << report.names[i] << "\n";
  }
  return out.str();
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::ostringstream out;
  out << "stage,round,optimizer,iterations,evaluations,loglik,grad_inf_norm,converged,message\n";
  for (const auto& t : trace)
    out << t.stage << "," << t.round << "," << optimizer_name(t.optimizer) << "," << t.iterations << ","
        << t.evaluations << "," << format_number(t.loglik, 15) << "," << format_number(t.grad_inf_norm, 6) << ","
        << (t.converged ? "true" : "false") << "," << csv_field(t.message) << "\n";
  return out.str();
}

FitSummary summarize(const FitResult& result, std::string label) {
  FitSummary s;
  s.label = std::move(label);
  s.spec = result.spec;
  s.loglik = result.loglik;
  s.np = result.np;
  s.n = result.n_subjects;
  s.converged = result.converged;
  return s;
}

std::string fitstats_csv(const std::vector<FitSummary>& rows) {
  std::ostringstream out;
  out << "model,family,np,AIC,BIC,logLik,n,converged\n";
  for (const auto& r : rows) {
    const FitStats s = fit_stats(r.loglik, r.np, r.n);
    out << csv_field(r.label) << "," << r.spec.family.name() << "," << r.np << "," << format_number(s.aic, 12) << ","
        << format_number(s.bic, 12) << "," << format_number(s.loglik, 12) << "," << r.n << ","
        << (r.converged ? "true" : "false") << "\n";
  }
  return out.str();
}

std::string fitstats_text(const std::vector<FitSummary>& rows) {
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.label.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(w)) << "Model" << std::right << std::setw(8) << "np"
      << std::setw(12) << "AIC" << std::setw(12) << "BIC" << std::setw(12) << "logLik" << "\n";
  out << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    const FitStats s = fit_stats(r.loglik, r.np, r.n);
    out << std::left << std::setw(static_cast<int>(w)) << r.label << std::right << std::setw(8) << r.np
        << std::setw(12) << s.aic << std::setw(12) << s.bic << std::setw(12) << s.loglik << "\n";
  }
  return out.str();
}

Comparison compare(std::vector<FitSummary> fits) {
  if (fits.size() < 2) throw InputError("compare: at least two fitted models are required");
  Comparison c;
  std::stable_sort(fits.begin(), fits.end(), [](const FitSummary& a, const FitSummary& b) {
    const double aa = fit_stats(a.loglik, a.np, a.n).aic;
    const double ab = fit_stats(b.loglik, b.np, b.n).aic;
    if (aa != ab) return aa < ab;
    return a.np < b.np;
  });
  c.rows = std::move(fits);
  for (const auto& full : c.rows)
    for (const auto& red : c.rows) {
      if (&full == &red || full.np <= red.np || full.n != red.n) continue;
      if (!is_nested(red.spec, full.spec)) continue;
      c.tests.push_back({full.label, red.label, lrt(full.loglik, full.np, red.loglik, red.np)});
    }
  return c;
}

std::string comparison_text(const Comparison& c) {
  std::ostringstream out;
  out << fitstats_text(c.rows);
  if (!c.tests.empty()) {
    out << "\nLikelihood-ratio tests\n";
    for (const auto& t : c.tests) {
      out << "  " << t.full << " vs " << t.reduced << ": stat = " << std::fixed << std::setprecision(2)
          << t.result.stat << ", df = " << t.result.df << ", p = " << std::scientific << std::setprecision(3)
          << t.result.p << std::defaultfloat << "\n";
    }
  }
  return out.str();
}

std::string lrt_csv(const Comparison& c) {
  std::ostringstream out;
  out << "full,reduced,stat,df,p\n";
  for (const auto& t : c.tests)
    out << csv_field(t.full) << "," << csv_field(t.reduced) << "," << format_number(t.result.stat, 12) << ","
        << t.result.df << "," << format_number(t.result.p, 6) << "\n";
  return out.str();
}

}  // namespace mglmm
