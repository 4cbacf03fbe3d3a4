#include "mglmm/sim.hpp"

#include <algorithm>
#include <sstream>

#include "mglmm/parallel.hpp"
#include "mglmm/report.hpp"

namespace mglmm {

ScenarioConfig ScenarioConfig::standard(Family family, int n, double rho) {
  ScenarioConfig c;
  c.family = family;
  c.n = n;
  c.rho = rho;
  switch (family.kind) {
    case FamilyKind::Poisson:
      c.disp = 1.0;
      c.max_replicates = 300;
      break;
    case FamilyKind::NegBin2:
      c.disp = 1.0;
      c.max_replicates = 600;
      break;
    case FamilyKind::ComPoissonMu:
      c.disp = 0.7;
      c.max_replicates = 400;
      break;
  }
  return c;
}

void ScenarioConfig::validate() const {
  if (n < 2) throw InputError("scenario: n must be at least 2");
  if (!(rho > -1 && rho < 1)) throw InputError("scenario: rho must lie in (-1, 1)");
  if (!(sigma2.minCoeff() >= 0)) throw InputError("scenario: variances must be nonnegative");
  if (family.has_dispersion() && !(disp > 0)) throw InputError("scenario: dispersion must be positive");
  if (target_valid < 1 || max_replicates < 1) throw InputError("scenario: replicate counts must be positive");
}

ModelSpec ScenarioConfig::model_spec() const {
  ModelSpec s;
  s.family = family;
  s.responses = {ResponseSpec{"y1", true, {}}, ResponseSpec{"y2", true, {}}};
  return s;
}

std::vector<TrueParam> true_parameters(const ScenarioConfig& c) {
  std::vector<TrueParam> t{{"beta0_1", c.beta0(0)},
                           {"beta0_2", c.beta0(1)},
                           {"sigma_1", std::sqrt(c.sigma2(0))},
                           {"sigma_2", std::sqrt(c.sigma2(1))},
                           {"rho", c.rho}};
  if (c.family.has_dispersion()) {
    const std::string sym = c.family.dispersion_symbol();
    t.push_back({sym + "_1", c.disp});
    t.push_back({sym + "_2", c.disp});
  }
  return t;
}

Dataset generate(const ScenarioConfig& c, unsigned long long seed) {
  c.validate();
  Rng rng(seed);
  Eigen::Matrix2d sigma;
  const double cov = c.rho * std::sqrt(c.sigma2(0) * c.sigma2(1));
  sigma << c.sigma2(0), cov, cov, c.sigma2(1);
  const bool degenerate = c.sigma2.minCoeff() <= 0;
  Dataset d;
  d.response_names = {"y1", "y2"};
  d.Y.resize(c.n, 2);
  const std::optional<double> disp = c.family.has_dispersion() ? std::optional<double>(c.disp) : std::nullopt;
  for (int i = 0; i < c.n; ++i) {
    Eigen::Vector2d b = Eigen::Vector2d::Zero();
    if (!degenerate) b = mvn_sample(sigma, rng);
    for (int r = 0; r < 2; ++r) d.Y(i, r) = sample(c.family, std::exp(c.beta0(r) + b(r)), disp, rng);
  }
  return d;
}

namespace {

/// Position of each true parameter among the fit's natural parameters.
std::vector<int> match_natural(const std::vector<NaturalParam>& nat, const ScenarioConfig& c) {
  std::vector<int> idx;
  auto find = [&](const std::string& kind, int r) {
    for (std::size_t m = 0; m < nat.size(); ++m)
      if (nat[m].kind == kind && nat[m].response == r) return static_cast<int>(m);
    throw InputError("simulation: parameter " + kind + " missing from fit");
  };
  idx.push_back(find("beta", 0));
  idx.push_back(find("beta", 1));
  idx.push_back(find("sigma", 0));
  idx.push_back(find("sigma", 1));
  idx.push_back(find("rho", 0));
  if (c.family.has_dispersion()) {
    idx.push_back(find(c.family.dispersion_symbol(), 0));
    idx.push_back(find(c.family.dispersion_symbol(), 1));
  }
  return idx;
}

}  // namespace

ReplicateResult run_replicate(const ScenarioConfig& c, int index, const SimControl& ctrl) {
  ReplicateResult out;
  out.index = index;
  out.seed = derive_seed(c.seed, static_cast<unsigned long long>(index));
  const auto truth = true_parameters(c);
  out.estimate.assign(truth.size(), std::nan(""));
  out.se.assign(truth.size(), std::nullopt);
  const Dataset data = generate(c, out.seed);
  FitResult fr;
  try {
    fr = fit(c.model_spec(), data, ctrl.fit);
  } catch (const std::exception&) {
    out.reason = "fit_error";
    return out;
  }
  out.converged = fr.converged;
  out.loglik = fr.loglik;
  const std::vector<int> idx = match_natural(fr.natural, c);
  for (std::size_t t = 0; t < idx.size(); ++t) {
    out.estimate[t] = fr.natural[idx[t]].estimate;
    out.se[t] = fr.natural[idx[t]].se;
  }
  if (!fr.converged) {
    out.reason = "not_converged";
    return out;
  }
  const ExclusionRules& ru = ctrl.rules;
  const std::size_t rho_at = 4;
  if (c.family.kind == FamilyKind::NegBin2) {
    if (std::max(out.estimate[5], out.estimate[6]) > ru.max_phi) {
      out.reason = "phi_gt_5";
      return out;
    }
  } else if (c.family.kind == FamilyKind::ComPoissonMu) {
    if (std::max(out.estimate[5], out.estimate[6]) > ru.max_nu) {
      out.reason = "nu_gt_4";
      return out;
    }
    if (out.se[rho_at] && *out.se[rho_at] > ru.max_rho_se) {
      out.reason = "rho_se_gt_2";
      return out;
    }
  }
  const bool any_missing = std::any_of(fr.se.begin(), fr.se.end(), [](const auto& s) { return !s; }) ||
                           std::any_of(out.se.begin(), out.se.end(), [](const auto& s) { return !s; });
  if (any_missing) {
    out.reason = "missing_se";
    return out;
  }
  for (int j = 0; j < fr.estimates.size(); ++j) {
    if (std::abs(fr.estimates(j)) > ru.extreme_estimate || *fr.se[j] > ru.extreme_se) {
      out.reason = "extreme";
      return out;
    }
  }
  out.valid = true;
  return out;
}

ScenarioSummary run_scenario(const ScenarioConfig& config, const SimControl& ctrl) {
  config.validate();
  ScenarioSummary s;
  s.config = config;
  int next = 0;
  while (s.valid < config.target_valid && next < config.max_replicates) {
    const int need = config.target_valid - s.valid;
    const int batch = std::min(config.max_replicates - next, std::max(need, ctrl.threads));
    std::vector<ReplicateResult> results(batch);
    parallel_for(batch, ctrl.threads, [&](int j) { results[j] = run_replicate(config, next + j, ctrl); });
    for (auto& r : results) {
      if (s.valid >= config.target_valid) break;
      ++s.generated;
      if (r.valid) ++s.valid;
      else {
        ++s.excluded;
        ++s.reasons[r.reason];
      }
      s.replicates.push_back(std::move(r));
    }
    next += batch;
  }
  s.complete = s.valid >= config.target_valid;

  const auto truth = true_parameters(config);
  const double z = normal_quantile(0.975);
  for (std::size_t t = 0; t < truth.size(); ++t) {
    ParamSummary p;
    p.name = truth[t].name;
    p.truth = truth[t].value;
    double sum_est = 0, sum_se = 0;
    int covered = 0;
    for (const auto& r : s.replicates) {
      if (!r.valid || !r.se[t]) continue;
      ++p.used;
      sum_est += r.estimate[t];
      sum_se += *r.se[t];
      if (std::abs(r.estimate[t] - p.truth) <= z * *r.se[t]) ++covered;
    }
    if (p.used > 0) {
      p.mean_estimate = sum_est / p.used;
      p.bias = p.mean_estimate - p.truth;
      p.mean_se = sum_se / p.used;
      p.coverage = static_cast<double>(covered) / p.used;
    } else {
      p.mean_estimate = p.bias = p.mean_se = p.coverage = std::nan("");
    }
    p.band_lower = p.bias - z * p.mean_se;
    p.band_upper = p.bias + z * p.mean_se;
    s.params.push_back(p);
  }
  return s;
}

std::string summary_csv(const std::vector<ScenarioSummary>& cells) {
  std::ostringstream out;
  out << "family,n,rho,parameter,truth,mean_estimate,bias,mean_se,band_lower,band_upper,coverage,valid,generated,"
         "complete\n";
  for (const auto& c : cells)
    for (const auto& p : c.params)
      out << c.config.family.name() << "," << c.config.n << "," << format_number(c.config.rho) << "," << p.name << ","
          << format_number(p.truth) << "," << format_number(p.mean_estimate) << "," << format_number(p.bias) << ","
          << format_number(p.mean_se) << "," << format_number(p.band_lower) << "," << format_number(p.band_upper)
          << "," << format_number(p.coverage) << "," << c.valid << "," << c.generated << ","
          << (c.complete ? "true" : "false") << "\n";
  return out.str();
}

std::string exclusions_csv(const std::vector<ScenarioSummary>& cells) {
  std::ostringstream out;
  out << "family,n,rho,reason,count\n";
  for (const auto& c : cells) {
    out << c.config.family.name() << "," << c.config.n << "," << format_number(c.config.rho) << ",valid," << c.valid
        << "\n";
    for (const auto& [reason, count] : c.reasons)
      out << c.config.family.name() << "," << c.config.n << "," << format_number(c.config.rho) << "," << reason << ","
          << count << "\n";
  }
  return out.str();
}

std::string replicates_csv(const std::vector<ScenarioSummary>& cells) {
  std::ostringstream out;
  out << "family,n,rho,replicate,seed,valid,reason,loglik,parameter,estimate,se\n";
  for (const auto& c : cells) {
    const auto truth = true_parameters(c.config);
    for (const auto& r : c.replicates)
      for (std::size_t t = 0; t < truth.size(); ++t)
        out << c.config.family.name() << "," << c.config.n << "," << format_number(c.config.rho) << "," << r.index
            << "," << r.seed << "," << (r.valid ? "true" : "false") << "," << r.reason << ","
            << format_number(r.loglik, 15) << "," << truth[t].name << "," << format_number(r.estimate[t]) << ","
            << (r.se[t] ? format_number(*r.se[t]) : "NA") << "\n";
  }
  return out.str();
}

}  // namespace mglmm
