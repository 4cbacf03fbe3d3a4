#include "mglmm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mglmm/parallel.hpp"

namespace mglmm {

namespace {

bool eval(const Objective& f, const Eigen::VectorXd& x, double& value, Eigen::VectorXd* grad,
          int& evaluations) {
  ++evaluations;
  bool ok = false;
  try {
    ok = f(x, value, grad);
  } catch (const std::exception&) {
    ok = false;
  }
  if (!ok || !std::isfinite(value)) return false;
  if (grad && !grad->allFinite()) return false;
  return true;
}

Eigen::VectorXd dogleg(const Eigen::MatrixXd& B, const Eigen::VectorXd& g, double radius) {
  Eigen::LLT<Eigen::MatrixXd> llt(B);
  Eigen::VectorXd pB;
  if (llt.info() == Eigen::Success) pB = -llt.solve(g);
  else pB = -g;
  if (pB.norm() <= radius) return pB;
  const double gBg = g.dot(B * g);
  const Eigen::VectorXd pU = gBg > 0 ? Eigen::VectorXd(-(g.squaredNorm() / gBg) * g)
                                     : Eigen::VectorXd(-radius / g.norm() * g);
  const double nU = pU.norm();
  if (nU >= radius) return radius / nU * pU;
  // ||pU + tau (pB - pU)|| = radius
  const Eigen::VectorXd d = pB - pU;
  const double a = d.squaredNorm();
  const double b = 2.0 * pU.dot(d);
  const double c = pU.squaredNorm() - radius * radius;
  const double tau = (-b + std::sqrt(std::max(0.0, b * b - 4.0 * a * c))) / (2.0 * a);
  return pU + tau * d;
}

double noise_level(double f) { return 1e-11 * (1.0 + std::abs(f)); }

}  // namespace

OptimResult minimize_trust_bfgs(const Objective& f, const Eigen::VectorXd& x0, const OptimOptions& opt) {
  OptimResult res;
  res.x = x0;
  const Eigen::Index n = x0.size();
  if (!eval(f, res.x, res.value, &res.grad, res.evaluations)) {
    res.message = "objective not evaluable at the starting point";
    return res;
  }
  if (n == 0) {
    res.converged = true;
    res.message = "no free parameters";
    return res;
  }
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;
  double radius = 1.0;
  for (res.iterations = 0; res.iterations < opt.max_iter; ++res.iterations) {
    if (res.grad.lpNorm<Eigen::Infinity>() <= opt.grad_tol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      return res;
    }
    const Eigen::VectorXd p = dogleg(B, res.grad, radius);
    const double pred = -(res.grad.dot(p) + 0.5 * p.dot(B * p));
    double fn = 0;
    Eigen::VectorXd gn;
    const bool ok = eval(f, res.x + p, fn, &gn, res.evaluations);
    const double ratio = (ok && pred > 0) ? (res.value - fn) / pred : -1.0;
    const double pnorm = p.norm();
    // Near the optimum the predicted decrease drops below rounding noise in
    // f; such steps are judged by the gradient instead.
    const bool within_noise = ok && std::abs(fn - res.value) <= noise_level(res.value) &&
                              gn.lpNorm<Eigen::Infinity>() < res.grad.lpNorm<Eigen::Infinity>();
    if (ratio < 0.25 && !within_noise) radius = 0.25 * pnorm;
    else if (ratio > 0.75 && pnorm >= 0.99 * radius) radius = std::min(2.0 * radius, 1e8);

    if ((ok && ratio > 1e-4 && fn <= res.value) || within_noise) {
      const Eigen::VectorXd y = gn - res.grad;
      const double sy = p.dot(y);
      if (sy > 1e-12 * pnorm * y.norm()) {
        if (!scaled) {
          B = (y.squaredNorm() / sy) * Eigen::MatrixXd::Identity(n, n);
          scaled = true;
        }
        const Eigen::VectorXd Bs = B * p;
        B += (y * y.transpose()) / sy - (Bs * Bs.transpose()) / p.dot(Bs);
      }
      res.x += p;
      res.value = fn;
      res.grad = std::move(gn);
    }
    if (radius < 1e-14 * std::max(1.0, res.x.norm())) {
      res.message = "trust region collapsed";
      return res;
    }
  }
  res.converged = res.grad.lpNorm<Eigen::Infinity>() <= opt.grad_tol;
  res.message = res.converged ? "gradient tolerance reached" : "iteration limit reached";
  return res;
}

OptimResult minimize_linesearch_bfgs(const Objective& f, const Eigen::VectorXd& x0, const OptimOptions& opt) {
  OptimResult res;
  res.x = x0;
  const Eigen::Index n = x0.size();
  if (!eval(f, res.x, res.value, &res.grad, res.evaluations)) {
    res.message = "objective not evaluable at the starting point";
    return res;
  }
  if (n == 0) {
    res.converged = true;
    res.message = "no free parameters";
    return res;
  }
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  bool identity = true;
  bool scaled = false;
  constexpr double c1 = 1e-4;
  for (res.iterations = 0; res.iterations < opt.max_iter; ++res.iterations) {
    if (res.grad.lpNorm<Eigen::Infinity>() <= opt.grad_tol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      return res;
    }
    Eigen::VectorXd d = -(H * res.grad);
    double slope = res.grad.dot(d);
    if (!(slope < 0)) {
      H.setIdentity();
      identity = true;
      d = -res.grad;
      slope = res.grad.dot(d);
    }
    double alpha = 1.0;
    if (identity && !scaled) alpha = std::min(1.0, 1.0 / res.grad.lpNorm<Eigen::Infinity>());

    bool accepted = false;
    double fn = 0;
    Eigen::VectorXd xn, gn;
    for (int ls = 0; ls < 60; ++ls) {
      xn = res.x + alpha * d;
      const bool ok = eval(f, xn, fn, nullptr, res.evaluations);
      if (ok && fn <= res.value + c1 * alpha * slope) {
        accepted = true;
        break;
      }
      if (ok && fn <= res.value + noise_level(res.value) && eval(f, xn, fn, &gn, res.evaluations) &&
          gn.lpNorm<Eigen::Infinity>() < res.grad.lpNorm<Eigen::Infinity>()) {
        accepted = true;
        break;
      }
      gn.resize(0);
      if (std::isfinite(fn) && fn > res.value) {
        // Safeguarded quadratic interpolation on the backtracking interval.
        const double denom = 2.0 * (fn - res.value - slope * alpha);
        double trial = denom > 0 ? -slope * alpha * alpha / denom : 0.5 * alpha;
        alpha = std::clamp(trial, 0.1 * alpha, 0.5 * alpha);
      } else {
        alpha *= 0.5;
      }
      if (alpha * d.lpNorm<Eigen::Infinity>() < 1e-16 * std::max(1.0, res.x.lpNorm<Eigen::Infinity>())) break;
    }
    if (!accepted) {
      if (!identity) {
        H.setIdentity();
        identity = true;
        scaled = false;
        continue;
      }
      res.message = "line search failed";
      return res;
    }
    if (gn.size() == 0 && !eval(f, xn, fn, &gn, res.evaluations)) {
      res.message = "gradient not evaluable at accepted point";
      return res;
    }
    const Eigen::VectorXd s = xn - res.x;
    const Eigen::VectorXd y = gn - res.grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        H = (sy / y.squaredNorm()) * Eigen::MatrixXd::Identity(n, n);
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd Hy = H * y;
      // H+ = (I - rho s y') H (I - rho y s') + rho s s'
      H += rho * ((1.0 + rho * y.dot(Hy)) * (s * s.transpose()) - (Hy * s.transpose() + s * Hy.transpose()));
      identity = false;
    }
    res.x = std::move(xn);
    res.value = fn;
    res.grad = std::move(gn);
  }
  res.converged = res.grad.lpNorm<Eigen::Infinity>() <= opt.grad_tol;
  res.message = res.converged ? "gradient tolerance reached" : "iteration limit reached";
  return res;
}

Eigen::VectorXd fd_steps(const Eigen::VectorXd& x, double rel, double min_step) {
  Eigen::VectorXd h(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) h(j) = std::max(min_step, rel * std::abs(x(j)));
  return h;
}

Eigen::VectorXd central_gradient(const ScalarFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                 int threads) {
  const int n = static_cast<int>(x.size());
  std::vector<double> v(2 * n);
  parallel_for(2 * n, threads, [&](int t) {
    Eigen::VectorXd xp = x;
    const int j = t / 2;
    xp(j) += (t % 2 == 0 ? 1.0 : -1.0) * h(j);
    v[t] = f(xp);
  });
  Eigen::VectorXd g(n);
  for (int j = 0; j < n; ++j) g(j) = (v[2 * j] - v[2 * j + 1]) / (2.0 * h(j));
  return g;
}

Eigen::MatrixXd central_hessian(const ScalarFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                int threads) {
  const int n = static_cast<int>(x.size());
  // Points: centre, x +- h_i e_i, and x +- h_i e_i +- h_j e_j for j < i.
  struct Point {
    int i, j, si, sj;
  };
  std::vector<Point> pts{{-1, -1, 0, 0}};
  for (int i = 0; i < n; ++i) {
    pts.push_back({i, -1, 1, 0});
    pts.push_back({i, -1, -1, 0});
    for (int j = 0; j < i; ++j)
      for (int si : {1, -1})
        for (int sj : {1, -1}) pts.push_back({i, j, si, sj});
  }
  std::vector<double> v(pts.size());
  parallel_for(static_cast<int>(pts.size()), threads, [&](int t) {
    Eigen::VectorXd xp = x;
    const Point& p = pts[t];
    if (p.i >= 0) xp(p.i) += p.si * h(p.i);
    if (p.j >= 0) xp(p.j) += p.sj * h(p.j);
    v[t] = f(xp);
  });
  Eigen::MatrixXd H(n, n);
  const double f0 = v[0];
  std::size_t t = 1;
  for (int i = 0; i < n; ++i) {
    const double fp = v[t++];
    const double fm = v[t++];
    H(i, i) = (fp - 2.0 * f0 + fm) / (h(i) * h(i));
    for (int j = 0; j < i; ++j) {
      double acc = 0;
      for (int si : {1, -1})
        for (int sj : {1, -1}) acc += si * sj * v[t++];
      H(i, j) = H(j, i) = acc / (4.0 * h(i) * h(j));
    }
  }
  return H;
}

Eigen::MatrixXd hessian_from_gradient(const VectorFn& grad, const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                      int threads) {
  const int n = static_cast<int>(x.size());
  std::vector<Eigen::VectorXd> g(2 * n);
  parallel_for(2 * n, threads, [&](int t) {
    Eigen::VectorXd xp = x;
    const int j = t / 2;
    xp(j) += (t % 2 == 0 ? 1.0 : -1.0) * h(j);
    g[t] = grad(xp);
  });
  Eigen::MatrixXd H(n, n);
  for (int j = 0; j < n; ++j) H.col(j) = (g[2 * j] - g[2 * j + 1]) / (2.0 * h(j));
  return 0.5 * (H + H.transpose());
}

}  // namespace mglmm
