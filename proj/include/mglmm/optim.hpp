#pragma once

// Unconstrained first-order minimizers and finite-difference helpers.

#include <functional>
#include <string>

#include <Eigen/Dense>

namespace mglmm {

/// Returns false when the objective cannot be evaluated at x (the caller
/// treats that as a rejected step). `grad` is null when only the value is
/// needed.
using Objective = std::function<bool(const Eigen::VectorXd& x, double& value, Eigen::VectorXd* grad)>;

struct OptimOptions {
  double grad_tol = 1e-6;  // on the gradient infinity-norm
  int max_iter = 500;
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0;
  Eigen::VectorXd grad;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
};

/// Trust-region quasi-Newton: dogleg steps on a BFGS model Hessian.
OptimResult minimize_trust_bfgs(const Objective& f, const Eigen::VectorXd& x0, const OptimOptions& opt);

/// Line-search quasi-Newton: BFGS inverse-Hessian update with Armijo
/// backtracking.
OptimResult minimize_linesearch_bfgs(const Objective& f, const Eigen::VectorXd& x0, const OptimOptions& opt);

/// Per-coordinate central-difference step max(min_step, rel * |x_j|).
Eigen::VectorXd fd_steps(const Eigen::VectorXd& x, double rel = 1e-5, double min_step = 1e-5);

// The difference helpers may call `f` concurrently when threads > 1; each
// evaluation point writes its own slot, so results do not depend on threads.
using ScalarFn = std::function<double(const Eigen::VectorXd&)>;
using VectorFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

Eigen::VectorXd central_gradient(const ScalarFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                 int threads = 1);

/// Second differences of values; symmetric.
Eigen::MatrixXd central_hessian(const ScalarFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                int threads = 1);

/// Central differences of a gradient, symmetrized.
Eigen::MatrixXd hessian_from_gradient(const VectorFn& grad, const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                      int threads = 1);

}  // namespace mglmm
