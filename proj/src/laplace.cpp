#include "mglmm/laplace.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "mglmm/parallel.hpp"

namespace mglmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Accepted steps may lose this much to rounding near the mode.
double roundoff_slack(double j) { return 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(j)); }

// Near the mode the joint is a sum of large cancelling terms, so its rounding
// noise can exceed the gain of a full Newton step. Such a step is accepted on
// the gradient instead: predicted gain negligible and gradient reduced.
bool gradient_accepts(const Eigen::VectorXd& grad, const Eigen::VectorXd& delta, const Eigen::VectorXd& next_grad) {
  return grad.dot(delta) <= 1e-9 && next_grad.lpNorm<Eigen::Infinity>() < grad.lpNorm<Eigen::Infinity>();
}

// Solves (H + tau I) x = g, raising tau from 1e-8 by doubling until the
// matrix is positive definite.
Eigen::VectorXd damped_solve(const Eigen::MatrixXd& H, const Eigen::VectorXd& g) {
  Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() == Eigen::Success) return llt.solve(g);
  const Eigen::Index k = H.rows();
  double tau = 1e-8;
  for (int it = 0; it < 200; ++it, tau *= 2.0) {
    llt.compute(H + tau * Eigen::MatrixXd::Identity(k, k));
    if (llt.info() == Eigen::Success) return llt.solve(g);
  }
  throw LaplaceError("inner Newton: could not regularize the Hessian");
}

}  // namespace

bool LaplaceState::all_converged() const {
  for (char c : converged)
    if (!c) return false;
  return true;
}

int LaplaceState::total_iterations() const {
  int s = 0;
  for (int it : iterations) s += it;
  return s;
}

MixedModel::MixedModel(ModelSpec spec, const Dataset& data, CmpSeriesControl series)
    : layout_(spec), data_(data.aligned_to(spec)), series_(series) {
  data_.validate();
  design_ = build_design(layout_.spec(), data_);
}

JointDensity::JointDensity(const MixedModel& model, const ParameterVector& params)
    : model_(model), params_(params) {
  const int k = model.k();
  if (static_cast<int>(params.beta.size()) != k || params.cov.dim() != k)
    throw InputError("parameter shapes do not match the model");
  eta0_ = linear_predictor(model.design(), params);
  sigma_ = build_sigma(params.cov).sigma;
  factor_ = sigma_factor(params.cov);
  const double log_det = 2.0 * factor_.diagonal().array().log().sum();
  if (!std::isfinite(log_det)) throw LaplaceError("random-effect covariance is degenerate");
  const Eigen::MatrixXd Linv = factor_.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(k, k));
  sigma_inv_ = Linv.transpose() * Linv;
  log_norm_ = -0.5 * (k * kLog2Pi + log_det);
}

JointDensity::Eval JointDensity::evaluate(int subject, const Eigen::VectorXd& b,
                                          DerivOrder order) const {
  const int k = model_.k();
  const Family family = model_.spec().family;
  const bool has_disp = family.has_dispersion();
  Eval e;
  e.cond.resize(k);
  const Eigen::VectorXd sb = sigma_inv_ * b;
  double cond = 0;
  for (int r = 0; r < k; ++r) {
    e.cond[r] = eta_derivs(family, model_.data().Y(subject, r), eta0_(subject, r) + b(r),
                           has_disp ? params_.log_disp(r) : 0.0, order, model_.series());
    cond += e.cond[r].value;
  }
  e.joint = cond - 0.5 * b.dot(sb) + log_norm_;
  if (order == DerivOrder::Value) return e;
  e.grad = -sb;
  e.neg_hess = sigma_inv_;
  for (int r = 0; r < k; ++r) {
    e.grad(r) += e.cond[r].d1;
    e.neg_hess(r, r) -= e.cond[r].d2;
  }
  return e;
}

JointDensity::Eval JointDensity::evaluate_whitened(int subject, const Eigen::VectorXd& u,
                                                   DerivOrder order) const {
  const int k = model_.k();
  const Family family = model_.spec().family;
  const bool has_disp = family.has_dispersion();
  const Eigen::VectorXd b = factor_.triangularView<Eigen::Lower>() * u;
  Eval e;
  e.cond.resize(k);
  double cond = 0;
  Eigen::VectorXd d1(k), w(k);
  for (int r = 0; r < k; ++r) {
    e.cond[r] = eta_derivs(family, model_.data().Y(subject, r), eta0_(subject, r) + b(r),
                           has_disp ? params_.log_disp(r) : 0.0, order, model_.series());
    cond += e.cond[r].value;
    d1(r) = e.cond[r].d1;
    w(r) = -e.cond[r].d2;
  }
  e.joint = cond - 0.5 * u.squaredNorm() + log_norm_;
  if (order == DerivOrder::Value) return e;
  e.grad = factor_.transpose() * d1 - u;
  e.neg_hess = factor_.transpose() * w.asDiagonal() * factor_;
  e.neg_hess.diagonal().array() += 1.0;
  return e;
}

JointDensity::Eval JointDensity::to_b_space(const Eval& whitened, const Eigen::VectorXd& u) const {
  const int k = model_.k();
  Eval e;
  e.joint = whitened.joint;
  e.cond = whitened.cond;
  if (whitened.grad.size() == 0) return e;
  // Sigma^-1 b = L^-T u
  e.grad = -factor_.transpose().triangularView<Eigen::Upper>().solve(u);
  e.neg_hess = sigma_inv_;
  for (int r = 0; r < k; ++r) {
    e.grad(r) += e.cond[r].d1;
    e.neg_hess(r, r) -= e.cond[r].d2;
  }
  return e;
}

SubjectMode solve_subject(const JointDensity& density, int subject, const Eigen::VectorXd& start,
                          const LaplaceControl& ctrl, DerivOrder final_order,
                          std::vector<double>* joint_trace) {
  SubjectMode out;
  const auto L = density.factor().triangularView<Eigen::Lower>();
  Eigen::VectorXd u = L.solve(start);
  if (!u.allFinite()) u.setZero();
  JointDensity::Eval cur;
  try {
    cur = density.evaluate_whitened(subject, u, DerivOrder::Inner);
  } catch (const std::exception&) {
    // A warm start can land outside the family's numerical range; retry from zero.
    u.setZero();
    cur = density.evaluate_whitened(subject, u, DerivOrder::Inner);
  }
  if (joint_trace) joint_trace->push_back(cur.joint);

  auto try_step = [&](const Eigen::VectorXd& delta, JointDensity::Eval& next,
                      Eigen::VectorXd& u_next) {
    double step = 1.0;
    for (int h = 0; h <= ctrl.max_halving; ++h, step *= 0.5) {
      u_next = u + step * delta;
      try {
        next = density.evaluate_whitened(subject, u_next, DerivOrder::Inner);
      } catch (const std::exception&) {
        continue;
      }
      if (!std::isfinite(next.joint)) continue;
      if (next.joint >= cur.joint - roundoff_slack(cur.joint)) return true;
      if (h == 0 && gradient_accepts(cur.grad, delta, next.grad)) return true;
    }
    return false;
  };

  for (int it = 0; it < ctrl.inner_max_iter; ++it) {
    if (cur.grad.lpNorm<Eigen::Infinity>() <= ctrl.inner_tol) {
      out.converged = true;
      break;
    }
    const Eigen::VectorXd delta = damped_solve(cur.neg_hess, cur.grad);
    JointDensity::Eval next;
    Eigen::VectorXd u_next;
    if (!try_step(delta, next, u_next)) break;
    u = std::move(u_next);
    cur = std::move(next);
    ++out.iterations;
    if (joint_trace) joint_trace->push_back(cur.joint);
  }
  if (!out.converged && cur.grad.lpNorm<Eigen::Infinity>() <= ctrl.inner_tol) out.converged = true;

  // One extra Newton step takes a converged mode to rounding level, so the
  // marginal value is smooth in the parameters and its gradient is exact.
  if (out.converged && cur.grad.lpNorm<Eigen::Infinity>() > 1e-12) {
    Eigen::LLT<Eigen::MatrixXd> llt(cur.neg_hess);
    if (llt.info() == Eigen::Success) {
      const Eigen::VectorXd delta = llt.solve(cur.grad);
      const Eigen::VectorXd u_next = u + delta;
      try {
        JointDensity::Eval next = density.evaluate_whitened(subject, u_next, DerivOrder::Inner);
        if (gradient_accepts(cur.grad, delta, next.grad)) {
          u = u_next;
          cur = std::move(next);
          if (joint_trace) joint_trace->push_back(cur.joint);
        }
      } catch (const std::exception&) {
      }
    }
  }
  if (final_order == DerivOrder::Full) cur = density.evaluate_whitened(subject, u, DerivOrder::Full);
  out.b = L * u;
  out.at_mode = density.to_b_space(cur, u);
  out.u = std::move(u);
  out.whitened = std::move(cur);
  return out;
}

namespace {

struct SubjectOutput {
  SubjectMode mode;
  double value = 0;
  bool pd = true;
  // gradient pieces
  Eigen::VectorXd w;  // beta weights per response
  Eigen::VectorXd a;  // log-dispersion contributions
  Eigen::MatrixXd GL;  // d log L_i / d L (lower triangle used)
};

SubjectOutput process_subject(const JointDensity& density, int i, const Eigen::VectorXd& start,
                              const LaplaceControl& ctrl, bool with_gradient) {
  SubjectOutput out;
  out.mode = solve_subject(density, i, start, ctrl, with_gradient ? DerivOrder::Full : DerivOrder::Inner);
  if (!out.mode.converged) return out;
  const auto& ev = out.mode.whitened;
  const int k = static_cast<int>(out.mode.b.size());
  // With b = L u, log det H = log det M - log det Sigma for M = I + L'WL, so
  // the normalizing constants cancel: sum_r l_r - u'u/2 - 1/2 log det M.
  Eigen::LLT<Eigen::MatrixXd> llt(ev.neg_hess);
  if (llt.info() != Eigen::Success) {
    out.pd = false;
    return out;
  }
  const Eigen::MatrixXd R = llt.matrixL();
  const double log_det = 2.0 * R.diagonal().array().log().sum();
  out.value = (ev.joint - density.log_norm()) - 0.5 * log_det;
  if (!with_gradient) return out;

  // Total derivative of the Laplace term through the mode:
  //   dL/dtheta = dj/dtheta - 1/2 tr(P dH/dtheta) + 1/2 z' d2j/db dtheta,
  // with P = H^-1 = L M^-1 L', v_m = P_mm d3_m and z = P v.
  const Eigen::MatrixXd& L = density.factor();
  const Eigen::MatrixXd S = llt.solve(Eigen::MatrixXd::Identity(k, k));
  const Eigen::MatrixXd LS = L * S;
  const Eigen::MatrixXd P = LS * L.transpose();
  Eigen::VectorXd v(k), d1(k), d2(k);
  for (int m = 0; m < k; ++m) {
    v(m) = P(m, m) * ev.cond[m].d3;
    d1(m) = ev.cond[m].d1;
    d2(m) = ev.cond[m].d2;
  }
  const Eigen::VectorXd z = P * v;
  const Eigen::VectorXd t = LS.transpose() * v;
  out.w.resize(k);
  out.a.resize(k);
  for (int r = 0; r < k; ++r) {
    const auto& c = ev.cond[r];
    out.w(r) = c.d1 + 0.5 * (P(r, r) * c.d3 + z(r) * c.d2);
    out.a(r) = c.da + 0.5 * (P(r, r) * c.d2a + z(r) * c.d1a);
  }
  // d/dL of the Laplace term: d1 u' from the joint at fixed u, W L M^-1 from
  // log det M, and the remaining terms from dW through the mode shift du/dL.
  const Eigen::VectorXd& u = out.mode.u;
  out.GL = d1 * (u + 0.5 * t).transpose() + (0.5 * (v + z.cwiseProduct(d2))) * u.transpose() +
           d2.asDiagonal() * LS;
  return out;
}

std::vector<SubjectOutput> run_subjects(const JointDensity& density, const LaplaceState* warm,
                                        const LaplaceControl& ctrl, bool with_gradient, int threads) {
  const MixedModel& model = density.model();
  const int n = model.n();
  const int k = model.k();
  const bool use_warm = warm && warm->b_hat.rows() == n && warm->b_hat.cols() == k;
  std::vector<SubjectOutput> outs(n);
  parallel_for(n, threads, [&](int i) {
    const Eigen::VectorXd start =
        use_warm ? Eigen::VectorXd(warm->b_hat.row(i).transpose()) : Eigen::VectorXd::Zero(k);
    outs[i] = process_subject(density, i, start, ctrl, with_gradient);
  });
  return outs;
}

LaplaceState collect_state(const std::vector<SubjectOutput>& outs, int k) {
  const int n = static_cast<int>(outs.size());
  LaplaceState st;
  st.b_hat.resize(n, k);
  st.inner_hessians.resize(n);
  st.converged.resize(n);
  st.iterations.resize(n);
  for (int i = 0; i < n; ++i) {
    st.b_hat.row(i) = outs[i].mode.b.transpose();
    st.inner_hessians[i] = outs[i].mode.at_mode.neg_hess;
    st.converged[i] = outs[i].mode.converged ? 1 : 0;
    st.iterations[i] = outs[i].mode.iterations;
  }
  return st;
}

}  // namespace

LaplaceState inner_solve(const MixedModel& model, const ParameterVector& params,
                         const LaplaceState* warm, const LaplaceControl& ctrl, int threads) {
  const JointDensity density(model, params);
  return collect_state(run_subjects(density, warm, ctrl, false, threads), model.k());
}

MarginalResult marginal_loglik(const MixedModel& model, const ParameterVector& params,
                               const LaplaceState* warm, const LaplaceControl& ctrl,
                               bool with_gradient, int threads) {
  const JointDensity density(model, params);
  const auto outs = run_subjects(density, warm, ctrl, with_gradient, threads);
  const int n = model.n();
  const int k = model.k();

  MarginalResult res;
  res.state = collect_state(outs, k);
  double total = 0;
  for (int i = 0; i < n; ++i) {
    if (!outs[i].mode.converged)
      throw LaplaceError("inner optimization did not converge for subject " + std::to_string(i));
    if (!outs[i].pd)
      throw LaplaceError("inner Hessian is not positive definite for subject " + std::to_string(i));
    total += outs[i].value;
  }
  if (!std::isfinite(total)) throw LaplaceError("marginal log-likelihood is not finite");
  res.value = total;
  if (!with_gradient) return res;

  const ParameterLayout& layout = model.layout();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(layout.size());

  Eigen::MatrixXd W(n, k);
  Eigen::VectorXd a_sum = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd GL = Eigen::MatrixXd::Zero(k, k);
  for (int i = 0; i < n; ++i) {
    W.row(i) = outs[i].w.transpose();
    a_sum += outs[i].a;
    GL += outs[i].GL;
  }
  for (int r = 0; r < k; ++r)
    grad.segment(layout.beta_offset(r), layout.n_beta(r)) = model.design().X[r].transpose() * W.col(r);
  if (layout.disp_free()) grad.segment(layout.disp_offset(), k) = a_sum;

  if (layout.n_sd_free() > 0 || layout.corr_free()) {
    // Chain rule through the factor; each dL/dpsi is lower triangular.
    const auto dL = factor_derivatives(params.cov);
    const Eigen::MatrixXd GLl = GL.triangularView<Eigen::Lower>();
    Eigen::VectorXd gpsi(dL.size());
    for (std::size_t p = 0; p < dL.size(); ++p) gpsi(p) = dL[p].cwiseProduct(GLl).sum();
    if (layout.n_sd_free() == k) grad.segment(layout.sd_offset(), k) = gpsi.head(k);
    else if (layout.n_sd_free() == 1) grad(layout.sd_offset()) = gpsi.head(k).sum();
    if (layout.corr_free()) grad.segment(layout.corr_offset(), corr_count(k)) = gpsi.tail(corr_count(k));
  }
  res.gradient = std::move(grad);
  return res;
}

MarginalResult marginal_loglik(const ModelSpec& spec, const ParameterVector& params,
                               const Dataset& data, const LaplaceState* warm,
                               const LaplaceControl& ctrl) {
  const MixedModel model(spec, data);
  return marginal_loglik(model, params, warm, ctrl, false, 1);
}

}  // namespace mglmm
