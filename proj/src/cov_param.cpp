#include "mglmm/cov_param.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mglmm {

std::vector<std::pair<int, int>> corr_pairs(int r) {
  std::vector<std::pair<int, int>> out;
  out.reserve(corr_count(r));
  for (int i = 1; i < r; ++i)
    for (int j = 0; j < i; ++j) out.emplace_back(i, j);
  return out;
}

CovSpec CovSpec::identity(int r) {
  return {Eigen::VectorXd::Zero(r), Eigen::VectorXd::Zero(corr_count(r))};
}

Eigen::MatrixXd corr_factor(const CovSpec& spec) {
  const int r = spec.dim();
  if (spec.corr_raw.size() != corr_count(r))
    throw std::invalid_argument("corr_raw has the wrong length");
  Eigen::MatrixXd L = Eigen::MatrixXd::Identity(r, r);
  int k = 0;
  for (int i = 1; i < r; ++i) {
    double norm2 = 1.0;
    for (int j = 0; j < i; ++j) {
      L(i, j) = spec.corr_raw(k++);
      norm2 += L(i, j) * L(i, j);
    }
    L.row(i).head(i + 1) /= std::sqrt(norm2);
  }
  return L;
}

CovMatrices build_sigma(const CovSpec& spec) {
  const Eigen::MatrixXd L = corr_factor(spec);
  CovMatrices out;
  const int r = spec.dim();
  const Eigen::VectorXd sd = spec.log_sd.array().exp();
  // Entry by entry so both triangles are bitwise equal.
  out.corr.resize(r, r);
  out.sigma.resize(r, r);
  for (int i = 0; i < r; ++i) {
    out.corr(i, i) = 1.0;
    out.sigma(i, i) = sd(i) * sd(i);
    for (int j = 0; j < i; ++j) {
      const double c = L.row(i).head(j + 1).dot(L.row(j).head(j + 1));
      out.corr(i, j) = out.corr(j, i) = c;
      out.sigma(i, j) = out.sigma(j, i) = sd(i) * c * sd(j);
    }
  }
  return out;
}

Eigen::VectorXd corr_raw_from_corr(const Eigen::MatrixXd& corr) {
  const int r = static_cast<int>(corr.rows());
  Eigen::LLT<Eigen::MatrixXd> llt(corr);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("correlation matrix is not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  Eigen::VectorXd raw(corr_count(r));
  int k = 0;
  for (int i = 1; i < r; ++i)
    for (int j = 0; j < i; ++j) raw(k++) = L(i, j) / L(i, i);
  return raw;
}

namespace {

// dC/du for every unconstrained entry, where u_ij (j < i) only moves row i
// of L: dl_i/du_ij = (e_j - l_i l_ij) / ||u_i||.
std::vector<Eigen::MatrixXd> corr_derivatives(const CovSpec& spec) {
  const int r = spec.dim();
  const Eigen::MatrixXd L = corr_factor(spec);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(corr_count(r));
  int k = 0;
  for (int i = 1; i < r; ++i) {
    double norm2 = 1.0;
    for (int j = 0; j < i; ++j) norm2 += spec.corr_raw(k + j) * spec.corr_raw(k + j);
    const double norm = std::sqrt(norm2);
    for (int j = 0; j < i; ++j) {
      Eigen::RowVectorXd dli = -L(i, j) * L.row(i);
      dli(j) += 1.0;
      dli /= norm;
      Eigen::MatrixXd dC = Eigen::MatrixXd::Zero(r, r);
      const Eigen::VectorXd col = L * dli.transpose();
      dC.row(i) = col.transpose();
      dC.col(i) += col;
      dC(i, i) = 0.0;
      out.push_back(std::move(dC));
    }
    k += i;
  }
  return out;
}

}  // namespace

Eigen::MatrixXd corr_from_raw_jacobian(const CovSpec& spec) {
  const int r = spec.dim();
  const int q = corr_count(r);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(r + q, r + q);
  for (int i = 0; i < r; ++i) J(i, i) = std::exp(spec.log_sd(i));
  const auto pairs = corr_pairs(r);
  const auto dC = corr_derivatives(spec);
  for (int p = 0; p < q; ++p)
    for (int m = 0; m < q; ++m) J(r + p, r + m) = dC[m](pairs[p].first, pairs[p].second);
  return J;
}

std::vector<Eigen::MatrixXd> sigma_derivatives(const CovSpec& spec) {
  const int r = spec.dim();
  const CovMatrices cm = build_sigma(spec);
  const Eigen::VectorXd sd = spec.log_sd.array().exp();
  std::vector<Eigen::MatrixXd> out;
  out.reserve(r + corr_count(r));
  for (int m = 0; m < r; ++m) {
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(r, r);
    d.row(m) += cm.sigma.row(m);
    d.col(m) += cm.sigma.col(m);
    out.push_back(std::move(d));
  }
  for (auto& dC : corr_derivatives(spec)) out.push_back(sd.asDiagonal() * dC * sd.asDiagonal());
  return out;
}

Eigen::MatrixXd sigma_factor(const CovSpec& spec) {
  return spec.log_sd.array().exp().matrix().asDiagonal() * corr_factor(spec);
}

std::vector<Eigen::MatrixXd> factor_derivatives(const CovSpec& spec) {
  const int r = spec.dim();
  const Eigen::MatrixXd C = corr_factor(spec);
  const Eigen::VectorXd sd = spec.log_sd.array().exp();
  std::vector<Eigen::MatrixXd> out;
  out.reserve(r + corr_count(r));
  for (int m = 0; m < r; ++m) {
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(r, r);
    d.row(m) = sd(m) * C.row(m);
    out.push_back(std::move(d));
  }
  int k = 0;
  for (int i = 1; i < r; ++i) {
    double norm2 = 1.0;
    for (int j = 0; j < i; ++j) norm2 += spec.corr_raw(k + j) * spec.corr_raw(k + j);
    const double norm = std::sqrt(norm2);
    for (int j = 0; j < i; ++j) {
      Eigen::MatrixXd d = Eigen::MatrixXd::Zero(r, r);
      d.row(i) = -C(i, j) * C.row(i);
      d(i, j) += 1.0;
      d.row(i) *= sd(i) / norm;
      out.push_back(std::move(d));
    }
    k += i;
  }
  return out;
}

double mvn_logpdf(const Eigen::VectorXd& b, const Eigen::MatrixXd& sigma) {
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw std::runtime_error("mvn_logpdf: Sigma is not positive definite");
  const Eigen::VectorXd z = llt.matrixL().solve(b);
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double k = static_cast<double>(b.size());
  return -0.5 * (k * std::log(2.0 * std::numbers::pi) + log_det + z.squaredNorm());
}

Eigen::VectorXd mvn_sample(const Eigen::MatrixXd& sigma, std::mt19937_64& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw std::runtime_error("mvn_sample: Sigma is not positive definite");
  std::normal_distribution<double> norm(0.0, 1.0);
  Eigen::VectorXd z(sigma.rows());
  for (int i = 0; i < z.size(); ++i) z(i) = norm(rng);
  return llt.matrixL() * z;
}

}  // namespace mglmm
