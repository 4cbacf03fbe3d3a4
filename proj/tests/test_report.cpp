#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "mglmm/report.hpp"

using namespace mglmm;

namespace {

ModelSpec two_response(FamilyKind f) {
  ModelSpec s;
  s.family = Family{f};
  s.responses = {{"y1", true, {"x"}}, {"y2", true, {}}};
  return s;
}

FitSummary summary(std::string label, ModelSpec spec, double ll, int np, int n = 100) {
  FitSummary s;
  s.label = std::move(label);
  s.spec = std::move(spec);
  s.loglik = ll;
  s.np = np;
  s.n = n;
  s.converged = true;
  return s;
}

// Integer vector with the given frequencies of 0, 1, 2, ...
Eigen::VectorXi from_counts(const std::vector<int>& freq) {
  int n = 0;
  for (int f : freq) n += f;
  Eigen::VectorXi y(n);
  int at = 0;
  for (std::size_t v = 0; v < freq.size(); ++v)
    for (int j = 0; j < freq[v]; ++j) y(at++) = static_cast<int>(v);
  return y;
}

double round3(double v) { return std::round(v * 1000) / 1000; }

}  // namespace

TEST_CASE("information criteria") {
  const FitStats t4 = fit_stats(-16837, 70, 5190);
  CHECK(t4.aic == 33814);
  CHECK(std::abs(t4.bic - 34272) <= 1);
  CHECK(t4.bic == doctest::Approx(33674 + 70 * std::log(5190.0)));
  const FitStats z = fit_stats(0, 0, 10);
  CHECK(z.aic == 0);
  CHECK(z.bic == 0);
}

TEST_CASE("larger np with equal loglik raises AIC and BIC") {
  for (int np : {5, 40, 500}) {
    const FitStats a = fit_stats(-1000, np, 300), b = fit_stats(-1000, np + 5, 300);
    CHECK(b.aic > a.aic);
    CHECK(b.bic > a.bic);
  }
}

TEST_CASE("likelihood-ratio test") {
  const LrtResult r = lrt(-1384.93, 1098, -1451.35, 1057);
  CHECK(r.stat == doctest::Approx(132.84).epsilon(1e-10));
  CHECK(r.df == 41);
  CHECK(r.p < 1e-5);
  const LrtResult same = lrt(-10, 5, -10, 5);
  CHECK(same.stat == 0);
  CHECK(same.p == 1);
  // df = 1: upper tail of chi-square(1) is erfc(sqrt(x / 2)).
  const LrtResult c = lrt(0, 1, -3.841 / 2, 0);
  CHECK(c.p == doctest::Approx(std::erfc(std::sqrt(3.841 / 2))).epsilon(1e-12));
  CHECK(c.p == doctest::Approx(0.05).epsilon(1e-3));
  // df = 2: upper tail is exp(-x / 2).
  CHECK(lrt(0, 2, -2.5, 0).p == doctest::Approx(std::exp(-2.5)).epsilon(1e-12));
  CHECK_THROWS_AS(lrt(0, 1, 0, 2), InputError);
}

TEST_CASE("nesting rules") {
  const ModelSpec full = two_response(FamilyKind::NegBin2);
  ModelSpec rho0 = full;
  rho0.constraints.fix_rho_zero = true;
  ModelSpec disp = full;
  disp.constraints.fixed_dispersion = 1.0;
  CHECK(is_nested(rho0, full));
  CHECK(is_nested(disp, full));
  CHECK_FALSE(is_nested(full, rho0));
  CHECK_FALSE(is_nested(rho0, disp));
  ModelSpec shared = full;
  shared.constraints.shared_variance = true;
  ModelSpec fixedvar = full;
  fixedvar.constraints.fixed_variance = 1.0;
  CHECK(is_nested(shared, full));
  CHECK(is_nested(fixedvar, shared));
  CHECK_FALSE(is_nested(shared, fixedvar));
  ModelSpec other = full;
  other.responses[1].covariates = {"x"};
  CHECK_FALSE(is_nested(full, other));
  // Poisson sits inside COM-Poisson at nu = 1, not inside NB.
  const ModelSpec pois = two_response(FamilyKind::Poisson);
  ModelSpec cmp = two_response(FamilyKind::ComPoissonMu);
  CHECK(is_nested(pois, cmp));
  CHECK_FALSE(is_nested(pois, full));
  cmp.constraints.fixed_dispersion = 1.5;
  CHECK_FALSE(is_nested(pois, cmp));

  FitResult a, b;
  a.spec = full;
  a.loglik = -100;
  a.np = 7;
  b.spec = rho0;
  b.loglik = -103;
  b.np = 6;
  CHECK(lrt(a, b).stat == doctest::Approx(6));
  CHECK_THROWS_AS(lrt(b, a), InputError);
}

TEST_CASE("Wald intervals and significance flags") {
  const WaldInterval w = wald_interval("x", 0, 1.0);
  CHECK(*w.lower == doctest::Approx(-1.959963985).epsilon(1e-9));
  CHECK(*w.upper == doctest::Approx(1.959963985).epsilon(1e-9));
  CHECK_FALSE(wald_interval("x", 1, std::nullopt).lower.has_value());
  CHECK(excludes_zero(0.99, 0.004));
  CHECK_FALSE(excludes_zero(-0.02, 0.02));
  CHECK_FALSE(excludes_zero(5, std::nullopt));
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959963985).epsilon(1e-9));

  CorrelationCell strong{0.99, 0.004, true, false};
  CHECK(format_correlation_cell(strong) == "0.99(<.01)*");
  CorrelationCell weak{-0.02, 0.02, false, false};
  CHECK(format_correlation_cell(weak) == "-0.02(0.02)");
  CorrelationCell none{0.3, std::nullopt, false, false};
  CHECK(format_correlation_cell(none) == "0.30(NA)");
}

TEST_CASE("correlation report flags exactly the intervals excluding zero") {
  FitResult r;
  ModelSpec s;
  s.family = Family{FamilyKind::Poisson};
  s.responses = {{"a", true, {}}, {"b", true, {}}, {"c", true, {}}};
  r.spec = s;
  r.natural = {{"rho[a,b]", "rho", 0, 1, 0.78, 0.09, false},
               {"rho[a,c]", "rho", 0, 2, -0.02, 0.02, false},
               {"rho[b,c]", "rho", 1, 2, 0.5, std::nullopt, false}};
  const CorrelationReport rep = correlation_report(r);
  CHECK(rep.cells[0][1].significant);
  CHECK(rep.cells[1][0].significant);
  CHECK_FALSE(rep.cells[0][2].significant);
  CHECK_FALSE(rep.cells[1][2].significant);
  CHECK(format_correlation_cell(rep.cells[0][1]) == "0.78(0.09)*");
  for (const auto& n : r.natural) {
    const bool flagged = rep.cells[n.response][n.response2].significant;
    const bool excl = n.se && (n.estimate - 1.96 * *n.se > 0 || n.estimate + 1.96 * *n.se < 0);
    CHECK(flagged == excl);
  }
  const std::string csv = correlation_csv(rep);
  CHECK(csv.find("0.78(0.09)*") != std::string::npos);
  CHECK(csv.find("0.50(NA)") != std::string::npos);
}

TEST_CASE("dispersion index") {
  // Reported summaries are rounded to three decimals; the ratio of the
  // rounded values must fall in the interval the rounding allows.
  auto di_bounds = [](double mean, double var) {
    return std::pair<double, double>((var - 5e-4) / (mean + 5e-4), (var + 5e-4) / (mean - 5e-4));
  };
  const auto [lo, hi] = di_bounds(0.302, 0.637);
  CHECK(lo <= 2.111);
  CHECK(2.111 <= hi);
  const auto [alo, ahi] = di_bounds(0.533, 1.085);
  CHECK(alo <= 2.034);
  CHECK(2.034 <= ahi);

  // A 5190-row column whose rounded summaries match the Ndoc row.
  const Eigen::VectorXi ndoc = from_counts({4359, 360, 298, 98, 59, 16});
  CHECK(ndoc.size() == 5190);
  CHECK(round3(ndoc.cast<double>().mean()) == 0.302);
  CHECK(round3(sample_variance(ndoc)) == 0.637);
  CHECK(round3(dispersion_index(ndoc)) == 2.111);

  // A 30-row column matching the Amblyopone row.
  const Eigen::VectorXi amb = from_counts({20, 7, 2, 0, 0, 1});
  CHECK(amb.size() == 30);
  CHECK(round3(amb.cast<double>().mean()) == 0.533);
  CHECK(round3(sample_variance(amb)) == 1.085);
  CHECK(round3(dispersion_index(amb)) == 2.034);

  Eigen::VectorXi constant = Eigen::VectorXi::Constant(10, 3);
  CHECK(sample_variance(constant) == 0);
  CHECK(dispersion_index(constant) == 0);
  CHECK_THROWS_AS(dispersion_index(Eigen::VectorXi::Zero(5)), InputError);
}

TEST_CASE("generalized dispersion index") {
  // Explicit double loop as the oracle.
  Eigen::MatrixXi Y(6, 3);
  Y << 0, 2, 5, 1, 0, 7, 4, 3, 2, 0, 1, 9, 2, 2, 4, 1, 0, 6;
  const int n = 6, k = 3;
  std::vector<double> m(k, 0);
  for (int r = 0; r < k; ++r) {
    for (int i = 0; i < n; ++i) m[r] += Y(i, r);
    m[r] /= n;
  }
  double num = 0, den = 0;
  for (int a = 0; a < k; ++a) {
    den += m[a] * m[a];
    for (int b = 0; b < k; ++b) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += (Y(i, a) - m[a]) * (Y(i, b) - m[b]);
      num += std::sqrt(m[a]) * s / (n - 1) * std::sqrt(m[b]);
    }
  }
  CHECK(gdi_value(Y) == doctest::Approx(num / den).epsilon(1e-13));

  // Single column: GDI reduces to the dispersion index.
  CHECK(gdi_value(Y.col(2)) == doctest::Approx(dispersion_index(Y.col(2))).epsilon(1e-13));

  // Independent Poisson columns: GDI near 1.
  std::mt19937_64 rng(2390);
  Eigen::MatrixXi P(20000, 3);
  for (int r = 0; r < 3; ++r) {
    std::poisson_distribution<int> pois(0.5 + 2 * r);
    for (int i = 0; i < P.rows(); ++i) P(i, r) = pois(rng);
  }
  const GdiResult g = gdi(P, 200, 2390, 1);
  CHECK(std::abs(g.gdi - 1) < 0.05);
  CHECK(g.se > 0);
  CHECK(g.se < 0.05);
  CHECK(g.resamples == 200);
  const GdiResult g4 = gdi(P, 200, 2390, 4);
  CHECK(g4.gdi == g.gdi);
  CHECK(g4.se == g.se);
  CHECK_THROWS_AS(gdi_value(Eigen::MatrixXi::Zero(5, 2)), InputError);
}

TEST_CASE("comparison ordering and nested tests") {
  const ModelSpec full = two_response(FamilyKind::NegBin2);
  ModelSpec disp = full;
  disp.constraints.fixed_dispersion = 1.0;
  const Comparison c =
      compare({summary("nb", full, -1384.93, 1098, 30), summary("nb-fixed", disp, -1451.35, 1057, 30)});
  REQUIRE(c.rows.size() == 2);
  CHECK(c.rows[0].label == "nb");
  REQUIRE(c.tests.size() == 1);
  CHECK(c.tests[0].full == "nb");
  CHECK(c.tests[0].result.stat == doctest::Approx(132.84));
  CHECK(c.tests[0].result.df == 41);

  // AIC tie broken by np ascending: -2(-10) + 2*3 = 26 = -2(-9) + 2*4.
  const ModelSpec pois = two_response(FamilyKind::Poisson);
  const Comparison tie = compare({summary("big", full, -9, 4), summary("small", pois, -10, 3)});
  CHECK(tie.rows[0].label == "small");
  CHECK(tie.tests.empty());

  CHECK_THROWS_AS(compare({summary("one", full, -1, 1)}), InputError);
  CHECK(lrt_csv(c).find("132.84") != std::string::npos);
  CHECK(comparison_text(c).find("df = 41") != std::string::npos);
}

TEST_CASE("number formatting") {
  CHECK(format_number(std::nan("")) == "NA");
  CHECK(format_number(INFINITY) == "Inf");
  CHECK(format_number(0.5) == "0.5");
  const std::string csv = fitstats_csv({summary("m", two_response(FamilyKind::Poisson), -16837, 70, 5190)});
  CHECK(csv.find("m,poisson,70,33814,") != std::string::npos);
}
