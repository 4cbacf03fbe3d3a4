#pragma once

// Laplace-approximated marginal likelihood. For each subject the joint
// log-density j_i(b) = log f(y_i | b) + log N(b; 0, Sigma) is maximized by
// Newton's method, and
//   log L ~ sum_i j_i(b_i) + (k/2) log(2 pi) - 1/2 log det H_i,
// with H_i the negative Hessian of j_i at the mode.

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "mglmm/model.hpp"

namespace mglmm {

class LaplaceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LaplaceControl {
  double inner_tol = 1e-8;
  int inner_max_iter = 50;
  int max_halving = 30;
};

struct LaplaceState {
  Eigen::MatrixXd b_hat;                        // n x k modes
  std::vector<Eigen::MatrixXd> inner_hessians;  // negative joint Hessians at the modes
  std::vector<char> converged;
  std::vector<int> iterations;

  bool all_converged() const;
  int total_iterations() const;
};

/// A model specification bound to a dataset (responses aligned to the spec
/// and design matrices built once).
class MixedModel {
 public:
  MixedModel(ModelSpec spec, const Dataset& data, CmpSeriesControl series = {});

  const ModelSpec& spec() const { return layout_.spec(); }
  const ParameterLayout& layout() const { return layout_; }
  const Design& design() const { return design_; }
  const Dataset& data() const { return data_; }
  const CmpSeriesControl& series() const { return series_; }
  int n() const { return data_.n(); }
  int k() const { return data_.k(); }

 private:
  ParameterLayout layout_;
  Dataset data_;
  Design design_;
  CmpSeriesControl series_;
};

/// Quantities shared by all subjects for one parameter value.
class JointDensity {
 public:
  JointDensity(const MixedModel& model, const ParameterVector& params);

  struct Eval {
    double joint = 0;
    Eigen::VectorXd grad;      // d j / d b
    Eigen::MatrixXd neg_hess;  // -d2 j / d b2
    std::vector<EtaDerivs> cond;
  };

  /// Throws DomainError / SeriesError from the family on invalid input.
  Eval evaluate(int subject, const Eigen::VectorXd& b, DerivOrder order) const;

  /// The same joint in whitened coordinates b = L u (Sigma = L L^T): grad and
  /// neg_hess are taken w.r.t. u, so neg_hess = I + L^T W L never involves
  /// Sigma^-1. `joint` equals the b-space value at b = L u.
  Eval evaluate_whitened(int subject, const Eigen::VectorXd& u, DerivOrder order) const;

  /// b-space gradient and Hessian rebuilt from a whitened evaluation.
  Eval to_b_space(const Eval& whitened, const Eigen::VectorXd& u) const;

  const MixedModel& model() const { return model_; }
  const ParameterVector& params() const { return params_; }
  const Eigen::MatrixXd& sigma() const { return sigma_; }
  const Eigen::MatrixXd& sigma_inv() const { return sigma_inv_; }
  const Eigen::MatrixXd& factor() const { return factor_; }
  double log_norm() const { return log_norm_; }

 private:
  const MixedModel& model_;
  ParameterVector params_;
  Eigen::MatrixXd eta0_;
  Eigen::MatrixXd sigma_;
  Eigen::MatrixXd sigma_inv_;
  Eigen::MatrixXd factor_;
  double log_norm_ = 0;  // -1/2 (k log 2pi + log det Sigma)
};

struct SubjectMode {
  Eigen::VectorXd b;
  Eigen::VectorXd u;  // whitened mode, b = L u
  JointDensity::Eval at_mode;
  JointDensity::Eval whitened;  // at_mode in u coordinates
  bool converged = false;
  int iterations = 0;
};

/// Damped Newton with step halving for one subject, run in whitened
/// coordinates; the start and the returned mode are in b space. `joint_trace`, when
/// given, receives the joint log-density after every accepted step
/// (starting with the initial point).
SubjectMode solve_subject(const JointDensity& density, int subject, const Eigen::VectorXd& start,
                          const LaplaceControl& ctrl, DerivOrder final_order = DerivOrder::Inner,
                          std::vector<double>* joint_trace = nullptr);

LaplaceState inner_solve(const MixedModel& model, const ParameterVector& params,
                         const LaplaceState* warm, const LaplaceControl& ctrl = {}, int threads = 1);

struct MarginalResult {
  double value = 0;
  LaplaceState state;
  /// d value / d flat parameters (empty unless requested).
  Eigen::VectorXd gradient;
};

/// Throws LaplaceError if any subject is unconverged or has a non-PD H_i.
MarginalResult marginal_loglik(const MixedModel& model, const ParameterVector& params,
                               const LaplaceState* warm, const LaplaceControl& ctrl = {},
                               bool with_gradient = false, int threads = 1);

MarginalResult marginal_loglik(const ModelSpec& spec, const ParameterVector& params,
                               const Dataset& data, const LaplaceState* warm = nullptr,
                               const LaplaceControl& ctrl = {});

}  // namespace mglmm
