#pragma once

#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mglmm/count_family.hpp"
#include "mglmm/cov_param.hpp"

namespace mglmm {

/// Malformed model specification, data or parameter shapes.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Simplified model variants. Each constraint removes coordinates from the
/// flat parameter vector and injects a fixed value on unflatten.
struct ConstraintSet {
  bool fix_rho_zero = false;
  std::optional<double> fixed_dispersion;  // natural scale (phi or nu)
  std::optional<double> fixed_variance;    // sigma^2 shared by all responses
  bool shared_variance = false;

  void validate() const;
  friend bool operator==(const ConstraintSet&, const ConstraintSet&) = default;
};

/// Defaults used when a fixed dispersion is requested without a value.
double default_fixed_dispersion(Family family);

struct ResponseSpec {
  std::string name;
  bool intercept = true;
  std::vector<std::string> covariates;

  int n_coef() const { return (intercept ? 1 : 0) + static_cast<int>(covariates.size()); }
  std::vector<std::string> coef_names() const;
};

struct ModelSpec {
  Family family;
  std::vector<ResponseSpec> responses;
  ConstraintSet constraints;
  bool standardize = false;

  int k() const { return static_cast<int>(responses.size()); }
  void validate() const;

  /// JSON document; schema documented in docs/model_spec.md.
  static ModelSpec from_json_text(const std::string& text);
  std::string to_json_text() const;
};

ModelSpec load_model_spec(const std::string& path);

/// Subjects by responses counts plus a covariate table keyed by column name.
struct Dataset {
  std::vector<std::string> response_names;
  Eigen::MatrixXi Y;
  std::map<std::string, Eigen::VectorXd> covariates;

  int n() const { return static_cast<int>(Y.rows()); }
  int k() const { return static_cast<int>(Y.cols()); }
  void validate() const;
  /// Rows selected by index, in the given order.
  Dataset subset(std::span<const int> rows) const;
  /// Response columns reordered to match `spec`.
  Dataset aligned_to(const ModelSpec& spec) const;
};

/// One design matrix per response (n x p_r).
struct Design {
  std::vector<Eigen::MatrixXd> X;
  std::vector<std::vector<std::string>> coef_names;
};

Design build_design(const ModelSpec& spec, const Dataset& data);

/// Structured parameters; log-scale dispersion and standard deviations.
struct ParameterVector {
  std::vector<Eigen::VectorXd> beta;
  Eigen::VectorXd log_disp;  // length k, empty for Poisson
  CovSpec cov;
};

/// Bijection between ParameterVector and the flat unconstrained vector under
/// the spec's constraint mask. Layout: betas (response-major), free log
/// dispersions, free log standard deviations (one if shared), free
/// correlation coordinates.
class ParameterLayout {
 public:
  explicit ParameterLayout(const ModelSpec& spec);

  int size() const { return size_; }
  int k() const { return k_; }
  int beta_offset(int r) const { return beta_offset_[r]; }
  int n_beta(int r) const { return n_beta_[r]; }
  int n_beta_total() const { return beta_total_; }
  int disp_offset() const { return disp_offset_; }
  bool disp_free() const { return disp_free_; }
  int sd_offset() const { return sd_offset_; }
  int n_sd_free() const { return n_sd_free_; }
  int corr_offset() const { return corr_offset_; }
  bool corr_free() const { return corr_free_; }
  const std::vector<std::string>& names() const { return names_; }

  Eigen::VectorXd flatten(const ParameterVector& p) const;
  ParameterVector unflatten(const Eigen::VectorXd& flat) const;
  /// Forces masked coordinates of `p` to their constrained values.
  ParameterVector constrained(ParameterVector p) const;

  const ModelSpec& spec() const { return spec_; }

 private:
  ModelSpec spec_;
  int k_ = 0;
  int size_ = 0;
  std::vector<int> beta_offset_, n_beta_;
  int beta_total_ = 0;
  int disp_offset_ = 0;
  bool disp_free_ = false;
  int sd_offset_ = 0;
  int n_sd_free_ = 0;
  int corr_offset_ = 0;
  bool corr_free_ = false;
  std::vector<std::string> names_;
};

Eigen::VectorXd flatten(const ParameterVector& params, const ModelSpec& spec);
ParameterVector unflatten(const Eigen::VectorXd& flat, const ModelSpec& spec);

/// Per-subject terms of the conditional log-likelihood given b_i.
struct SubjectCondTerms {
  double value = 0;
  Eigen::VectorXd grad;  // d/db_i
  Eigen::MatrixXd hess;  // d2/db_i^2 (diagonal: responses are conditionally independent)
};

struct CondLoglik {
  double value = 0;
  std::vector<SubjectCondTerms> subjects;
};

/// sum_i sum_r log f(y_ir | mu_ir = exp(x_ir' beta_r + b_ir), disp_r).
CondLoglik cond_loglik(const ModelSpec& spec, const ParameterVector& params,
                       const Dataset& data, const Eigen::MatrixXd& b,
                       const CmpSeriesControl& series = {});

/// Fixed-effects part of the linear predictor, n x k.
Eigen::MatrixXd linear_predictor(const Design& design, const ParameterVector& params);

}  // namespace mglmm
