#pragma once

// Random-effect covariance Sigma = D C D with D = diag(exp(log_sd)) and C a
// correlation matrix from the normalized lower-triangular ("scaled
// Cholesky") map: row i of L is (u_i0, ..., u_i,i-1, 1) / ||.||, C = L L^T.
// Unconstrained entries are stored row-wise: (1,0), (2,0), (2,1), (3,0), ...

#include <random>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mglmm {

inline int corr_count(int r) { return r * (r - 1) / 2; }

/// Row/column pairs (i > j) in storage order of corr_raw.
std::vector<std::pair<int, int>> corr_pairs(int r);

struct CovSpec {
  Eigen::VectorXd log_sd;
  Eigen::VectorXd corr_raw;

  int dim() const { return static_cast<int>(log_sd.size()); }
  static CovSpec identity(int r);
};

struct CovMatrices {
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd corr;
};

CovMatrices build_sigma(const CovSpec& spec);

/// Unit-diagonal lower-triangular map L (before normalization the diagonal
/// is one) after row normalization, so that corr = L L^T.
Eigen::MatrixXd corr_factor(const CovSpec& spec);

/// Inverse of the correlation map; `corr` must be positive definite.
Eigen::VectorXd corr_raw_from_corr(const Eigen::MatrixXd& corr);

/// Jacobian of (sigma_1..sigma_r, rho pairs) w.r.t. (log_sd, corr_raw).
Eigen::MatrixXd corr_from_raw_jacobian(const CovSpec& spec);

/// dSigma/dtheta for theta = (log_sd_1..log_sd_r, corr_raw_1..).
std::vector<Eigen::MatrixXd> sigma_derivatives(const CovSpec& spec);

/// Lower-triangular L = diag(sd) * corr_factor with Sigma = L L^T.
Eigen::MatrixXd sigma_factor(const CovSpec& spec);

/// dL/dtheta for the same theta ordering as sigma_derivatives.
std::vector<Eigen::MatrixXd> factor_derivatives(const CovSpec& spec);

double mvn_logpdf(const Eigen::VectorXd& b, const Eigen::MatrixXd& sigma);

Eigen::VectorXd mvn_sample(const Eigen::MatrixXd& sigma, std::mt19937_64& rng);

}  // namespace mglmm
