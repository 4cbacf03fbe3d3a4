#include "mglmm/fit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "mglmm/parallel.hpp"

namespace mglmm {

std::string optimizer_name(Optimizer o) { return o == Optimizer::QnA ? "A" : "B"; }

std::vector<Optimizer> parse_schedule(const std::string& text) {
  std::vector<Optimizer> out;
  std::string token;
  auto flush = [&] {
    std::string t;
    for (char c : token)
      if (!std::isspace(static_cast<unsigned char>(c))) t += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    token.clear();
    if (t == "A" || t == "QN-A") out.push_back(Optimizer::QnA);
    else if (t == "B" || t == "QN-B") out.push_back(Optimizer::QnB);
    else throw InputError("schedule: unknown optimizer '" + t + "' (expected A or B)");
  };
  for (char c : text) {
    if (c == ',') flush();
    else token += c;
  }
  flush();
  return out;
}

std::string schedule_string(const std::vector<Optimizer>& schedule) {
  std::string s;
  for (std::size_t i = 0; i < schedule.size(); ++i) s += (i ? "," : "") + optimizer_name(schedule[i]);
  return s;
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct GlmFit {
  Eigen::VectorXd beta;
  Eigen::VectorXd mu;
  bool ok = false;
};

GlmFit poisson_irls(const Eigen::MatrixXd& X, const Eigen::VectorXi& y) {
  GlmFit out;
  const Eigen::Index n = X.rows(), p = X.cols();
  const Eigen::VectorXd yd = y.cast<double>();
  // Start from the saturated-ish working response log(y + 0.5).
  Eigen::VectorXd eta = (yd.array() + 0.5).log().matrix();
  double dev_old = std::numeric_limits<double>::infinity();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd mu = eta.array().exp().matrix();
    const Eigen::VectorXd z = eta.array() + (yd - mu).array() / mu.array();
    const Eigen::MatrixXd XtW = X.transpose() * mu.asDiagonal();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(XtW * X);
    if (ldlt.info() != Eigen::Success) return out;
    beta = ldlt.solve(XtW * z);
    if (!beta.allFinite()) return out;
    eta = X * beta;
    if (eta.maxCoeff() > 30 || eta.minCoeff() < -30) return out;
    double dev = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = std::exp(eta(i));
      dev += 2.0 * ((yd(i) > 0 ? yd(i) * std::log(yd(i) / m) : 0.0) - (yd(i) - m));
    }
    if (std::abs(dev - dev_old) <= 1e-10 * (1.0 + std::abs(dev))) {
      out.beta = beta;
      out.mu = eta.array().exp().matrix();
      out.ok = true;
      return out;
    }
    dev_old = dev;
  }
  return out;
}

}  // namespace

ParameterVector initial_values(const ModelSpec& spec, const Dataset& data) {
  const ParameterLayout layout(spec);
  const Dataset aligned = data.aligned_to(spec);
  const Design design = build_design(spec, aligned);
  const int k = spec.k();
  ParameterVector p;
  p.cov = CovSpec::identity(k);
  for (int r = 0; r < k; ++r) {
    const Eigen::MatrixXd& X = design.X[r];
    const Eigen::VectorXi y = aligned.Y.col(r);
    const double ybar = y.cast<double>().mean();
    GlmFit g = poisson_irls(X, y);
    Eigen::VectorXd mu;
    if (g.ok) {
      p.beta.push_back(g.beta);
      mu = g.mu;
    } else {
      Eigen::VectorXd b = Eigen::VectorXd::Zero(X.cols());
      if (spec.responses[r].intercept) b(0) = std::log(ybar + 0.5);
      p.beta.push_back(b);
      mu = (X * b).array().exp().matrix();
    }
    // E[(y - mu)^2 / mu^2] ~ 1/mu + exp(sigma^2) - 1 under a lognormal intercept.
    double excess = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double m = std::max(mu(i), 1e-8);
      excess += (std::pow(y(i) - m, 2) / (m * m) - 1.0 / m);
    }
    excess /= std::max<Eigen::Index>(1, y.size());
    const double var = std::log1p(std::max(0.0, excess));
    p.cov.log_sd(r) = std::log(std::max(std::sqrt(var), 0.05));
  }
  if (spec.constraints.shared_variance) p.cov.log_sd.setConstant(p.cov.log_sd.mean());
  if (spec.family.has_dispersion()) p.log_disp = Eigen::VectorXd::Zero(k);
  return layout.constrained(std::move(p));
}

std::vector<int> srs_indices(int n, int size, unsigned long long seed) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  size = std::clamp(size, 0, n);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < size; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

HessianInverse covariance_from_hessian(const Eigen::MatrixXd& hessian) {
  const Eigen::Index n = hessian.rows();
  HessianInverse out;
  out.vcov = Eigen::MatrixXd::Constant(n, n, kNaN);
  out.se.assign(n, std::nullopt);
  if (n == 0) {
    out.positive_definite = true;
    return out;
  }
  if (!hessian.allFinite()) return out;
  const Eigen::MatrixXd H = 0.5 * (hessian + hessian.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
  const Eigen::VectorXd& lam = es.eigenvalues();
  const Eigen::MatrixXd& V = es.eigenvectors();
  const double threshold = 1e-8 * std::max(1.0, lam.maxCoeff());
  std::vector<char> missing(n, 0);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  bool pd = true;
  for (Eigen::Index e = 0; e < n; ++e) {
    if (lam(e) <= threshold) {
      pd = false;
      for (Eigen::Index j = 0; j < n; ++j)
        if (std::abs(V(j, e)) >= 0.1) missing[j] = 1;
    } else {
      cov.noalias() += V.col(e) * V.col(e).transpose() / lam(e);
    }
  }
  out.positive_definite = pd;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (!missing[i] && !missing[j]) out.vcov(i, j) = cov(i, j);
  for (Eigen::Index j = 0; j < n; ++j)
    if (!missing[j] && out.vcov(j, j) > 0) out.se[j] = std::sqrt(out.vcov(j, j));
  return out;
}

std::vector<NaturalParam> natural_parameters(const ParameterLayout& layout, const Eigen::VectorXd& flat,
                                             const Eigen::MatrixXd& vcov,
                                             const std::vector<std::optional<double>>& se) {
  const ModelSpec& spec = layout.spec();
  const auto& c = spec.constraints;
  const int k = layout.k();
  const int np = layout.size();
  const ParameterVector p = layout.unflatten(flat);
  std::vector<NaturalParam> out;
  std::vector<Eigen::VectorXd> rows;
  auto add = [&](NaturalParam q, Eigen::VectorXd row) {
    out.push_back(std::move(q));
    rows.push_back(std::move(row));
  };
  for (int r = 0; r < k; ++r) {
    const auto names = spec.responses[r].coef_names();
    for (int j = 0; j < layout.n_beta(r); ++j) {
      Eigen::VectorXd row = Eigen::VectorXd::Zero(np);
      row(layout.beta_offset(r) + j) = 1.0;
      add({"beta[" + spec.responses[r].name + "]." + names[j], "beta", r, -1, p.beta[r](j), {}, false}, row);
    }
  }
  if (spec.family.has_dispersion()) {
    const std::string sym = spec.family.dispersion_symbol();
    for (int r = 0; r < k; ++r) {
      const double est = std::exp(p.log_disp(r));
      Eigen::VectorXd row = Eigen::VectorXd::Zero(np);
      if (layout.disp_free()) row(layout.disp_offset() + r) = est;
      add({sym + "[" + spec.responses[r].name + "]", sym, r, -1, est, {}, !layout.disp_free()}, row);
    }
  }
  for (int r = 0; r < k; ++r) {
    const double est = std::exp(p.cov.log_sd(r));
    Eigen::VectorXd row = Eigen::VectorXd::Zero(np);
    const bool fixed = layout.n_sd_free() == 0;
    if (!fixed) row(layout.sd_offset() + (layout.n_sd_free() == 1 ? 0 : r)) = est;
    add({"sigma[" + spec.responses[r].name + "]", "sigma", r, -1, est, {}, fixed}, row);
  }
  const auto pairs = corr_pairs(k);
  const Eigen::MatrixXd corr = build_sigma(p.cov).corr;
  const Eigen::MatrixXd J = layout.corr_free() ? corr_from_raw_jacobian(p.cov) : Eigen::MatrixXd();
  for (std::size_t q = 0; q < pairs.size(); ++q) {
    const auto [i, j] = pairs[q];
    Eigen::VectorXd row = Eigen::VectorXd::Zero(np);
    if (layout.corr_free())
      for (int t = 0; t < corr_count(k); ++t) row(layout.corr_offset() + t) = J(k + q, k + t);
    add({"rho[" + spec.responses[j].name + "," + spec.responses[i].name + "]", "rho", j, i, corr(i, j), {},
         c.fix_rho_zero},
        row);
  }
  for (std::size_t m = 0; m < out.size(); ++m) {
    if (out[m].fixed) continue;
    const Eigen::VectorXd& row = rows[m];
    bool ok = true;
    double var = 0;
    for (int a = 0; a < np && ok; ++a) {
      if (row(a) == 0) continue;
      if (!se[a]) {
        ok = false;
        break;
      }
      for (int b = 0; b < np; ++b) {
        if (row(b) == 0) continue;
        if (!std::isfinite(vcov(a, b))) {
          ok = false;
          break;
        }
        var += row(a) * vcov(a, b) * row(b);
      }
    }
    if (ok && var >= 0) out[m].se = std::sqrt(var);
  }
  return out;
}

namespace {

bool finite_params(const Eigen::VectorXd& x) { return x.size() == 0 || x.allFinite(); }

/// Negative marginal log-likelihood with its gradient, warm-starting each
/// inner solve from the most recent successful evaluation.
class OuterObjective {
 public:
  OuterObjective(const MixedModel& model, const FitControl& ctrl) : model_(model), ctrl_(ctrl) {}

  bool operator()(const Eigen::VectorXd& x, double& value, Eigen::VectorXd* grad) {
    const ParameterVector p = model_.layout().unflatten(x);
    const bool analytic = grad && ctrl_.gradient == GradientMode::Analytic;
    const int inner_threads = ctrl_.gradient == GradientMode::Analytic || !grad ? ctrl_.threads : 1;
    MarginalResult m = marginal_loglik(model_, p, warm_ ? &*warm_ : nullptr, ctrl_.laplace, analytic, inner_threads);
    value = -m.value;
    warm_ = std::move(m.state);
    if (analytic) *grad = -m.gradient;
    else if (grad) *grad = fd_gradient(x);
    return std::isfinite(value);
  }

  /// Central differences of the negative marginal around x, each point
  /// warm-started from the state at x.
  Eigen::VectorXd fd_gradient(const Eigen::VectorXd& x) const {
    const LaplaceState centre = *warm_;
    ScalarFn f = [&](const Eigen::VectorXd& xp) {
      return -marginal_loglik(model_, model_.layout().unflatten(xp), &centre, ctrl_.laplace, false, 1).value;
    };
    return central_gradient(f, x, fd_steps(x, ctrl_.fd_rel, ctrl_.fd_min), ctrl_.threads);
  }

  const std::optional<LaplaceState>& state() const { return warm_; }

 private:
  const MixedModel& model_;
  const FitControl& ctrl_;
  std::optional<LaplaceState> warm_;
};

}  // namespace

HessianInverse observed_information_se(const MixedModel& model, const Eigen::VectorXd& at, const FitControl& ctrl,
                                       const LaplaceState* warm) {
  std::optional<LaplaceState> centre;
  if (warm) centre = *warm;
  else centre = marginal_loglik(model, model.layout().unflatten(at), nullptr, ctrl.laplace, false, ctrl.threads).state;
  const Eigen::VectorXd h = fd_steps(at, 1e-4, 1e-4);
  Eigen::MatrixXd H;
  try {
    if (ctrl.gradient == GradientMode::Analytic) {
      VectorFn g = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
        return -marginal_loglik(model, model.layout().unflatten(x), &*centre, ctrl.laplace, true, 1).gradient;
      };
      H = hessian_from_gradient(g, at, h, ctrl.threads);
    } else {
      ScalarFn f = [&](const Eigen::VectorXd& x) {
        return -marginal_loglik(model, model.layout().unflatten(x), &*centre, ctrl.laplace, false, 1).value;
      };
      H = central_hessian(f, at, h, ctrl.threads);
    }
  } catch (const std::exception&) {
    H = Eigen::MatrixXd::Constant(at.size(), at.size(), kNaN);
  }
  return covariance_from_hessian(H);
}

FitResult fit(const ModelSpec& spec, const Dataset& data, const FitControl& ctrl) {
  spec.validate();
  data.validate();
  if (ctrl.schedule.empty()) throw InputError("fit: optimizer schedule is empty");
  const MixedModel model(spec, data, ctrl.series);
  const ParameterLayout& layout = model.layout();

  FitResult res;
  res.spec = spec;
  res.names = layout.names();
  res.np = layout.size();
  res.n_subjects = data.n();

  ParameterVector init = ctrl.init ? layout.constrained(*ctrl.init) : initial_values(spec, model.data());
  if (ctrl.srs && ctrl.srs_size < data.n()) {
    const std::vector<int> rows = srs_indices(data.n(), ctrl.srs_size, ctrl.srs_seed);
    FitControl sub = ctrl;
    sub.srs = false;
    sub.compute_se = false;
    sub.init = init;
    FitResult pre = fit(spec, model.data().subset(rows), sub);
    for (auto row : pre.trace) {
      row.stage = "srs";
      res.trace.push_back(std::move(row));
    }
    if (finite_params(pre.estimates) && std::isfinite(pre.loglik)) init = pre.params;
  }

  OuterObjective objective(model, ctrl);
  Objective fn = [&](const Eigen::VectorXd& x, double& v, Eigen::VectorXd* g) { return objective(x, v, g); };
  Eigen::VectorXd x = layout.flatten(init);
  const OptimOptions oo{ctrl.outer_tol, ctrl.max_iter};
  for (std::size_t round = 0; round < ctrl.schedule.size(); ++round) {
    const Optimizer o = ctrl.schedule[round];
    const OptimResult r = o == Optimizer::QnA ? minimize_trust_bfgs(fn, x, oo) : minimize_linesearch_bfgs(fn, x, oo);
    TraceRow row;
    row.stage = "full";
    row.round = static_cast<int>(round) + 1;
    row.optimizer = o;
    row.iterations = r.iterations;
    row.evaluations = r.evaluations;
    row.loglik = r.grad.size() == r.x.size() ? -r.value : kNaN;
    row.grad_inf_norm = r.grad.size() == r.x.size() && r.grad.size() > 0 ? r.grad.lpNorm<Eigen::Infinity>() : 0.0;
    if (r.grad.size() != r.x.size()) row.grad_inf_norm = kNaN;
    row.converged = r.converged;
    row.message = r.message;
    res.trace.push_back(row);
    if (r.grad.size() == r.x.size() && finite_params(r.x) && std::isfinite(r.value)) x = r.x;
  }

  res.estimates = x;
  res.params = layout.unflatten(x);
  res.se.assign(layout.size(), std::nullopt);
  res.vcov = Eigen::MatrixXd::Constant(layout.size(), layout.size(), kNaN);
  double value = 0;
  Eigen::VectorXd grad;
  bool evaluable = false;
  try {
    evaluable = objective(x, value, &grad);
  } catch (const std::exception& e) {
    res.message = e.what();
  }
  if (!evaluable) {
    res.loglik = kNaN;
    res.grad_inf_norm = kNaN;
    res.converged = false;
    if (res.message.empty()) res.message = "marginal likelihood not evaluable at the final estimates";
    res.natural = natural_parameters(layout, x, res.vcov, res.se);
    return res;
  }
  res.loglik = -value;
  res.grad_inf_norm = grad.size() ? grad.lpNorm<Eigen::Infinity>() : 0.0;
  res.converged = res.grad_inf_norm <= ctrl.outer_tol;
  res.message = res.converged ? "converged" : "gradient tolerance not reached";
  res.state = *objective.state();
  if (ctrl.compute_se) {
    HessianInverse hi = observed_information_se(model, x, ctrl, &res.state);
    res.vcov = std::move(hi.vcov);
    res.se = std::move(hi.se);
    res.hessian_pd = hi.positive_definite;
  }
  res.natural = natural_parameters(layout, x, res.vcov, res.se);
  return res;
}

}  // namespace mglmm
