// Writes the synthetic test fixtures: an AHS-schema table (5190 x 5 counts,
// 10 covariates), its 300-row subsample, and an ANT-schema table (30 sites
// x 41 species). Output is a pure function of the seed.
//
//   mglmm_fixtures <out-dir> [seed]

#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <string>

#include "mglmm/count_family.hpp"
#include "mglmm/cov_param.hpp"
#include "mglmm/data_io.hpp"
#include "mglmm/fit.hpp"

using namespace mglmm;
namespace fs = std::filesystem;

namespace {

double round_to(double v, double step) { return std::round(v / step) * step; }

Dataset ahs(Rng& rng) {
  const int n = 5190;
  Dataset d;
  d.response_names = {"Ndoc", "Nndoc", "Nadm", "Nhosp", "Nmed"};
  d.Y.resize(n, 5);
  std::bernoulli_distribution sex(0.52), levy(0.44), freepoor(0.10), freerepa(0.21), chcond(0.40), active(0.15);
  std::uniform_int_distribution<int> age_class(0, 10), days(1, 14);
  std::gamma_distribution<double> income(2.5, 0.23);
  std::poisson_distribution<int> illness(1.4), hscore(1.2);
  std::map<std::string, Eigen::VectorXd> x;
  for (const char* c : {"sex", "age", "income", "levyplus", "freepoor", "freerepa", "illness", "actdays", "hscore",
                        "chcond"})
    x[c] = Eigen::VectorXd(n);

  // Counts are denser than the survey's (means roughly 1 to 6) so that a
  // 300-row subsample still identifies every correlation and dispersion.
  const Eigen::VectorXd b0 = (Eigen::VectorXd(5) << -0.6, -0.8, -1.1, -0.5, 0.8).finished();
  const Eigen::VectorXd slope_ill = (Eigen::VectorXd(5) << 0.18, 0.10, 0.15, 0.20, 0.25).finished();
  const Eigen::VectorXd slope_act = (Eigen::VectorXd(5) << 0.10, 0.06, 0.08, 0.12, 0.03).finished();
  CovSpec cs = CovSpec::identity(5);
  cs.log_sd.setConstant(0.5 * std::log(0.6));
  Eigen::MatrixXd corr = Eigen::MatrixXd::Constant(5, 5, 0.5);
  corr.diagonal().setOnes();
  cs.corr_raw = corr_raw_from_corr(corr);
  const Eigen::MatrixXd sigma = build_sigma(cs).sigma;

  for (int i = 0; i < n; ++i) {
    x["sex"](i) = sex(rng);
    x["age"](i) = 0.19 + 0.05 * age_class(rng) + (age_class(rng) == 10 ? 0.03 : 0.0);
    x["income"](i) = std::min(1.5, round_to(income(rng), 0.05));
    x["levyplus"](i) = levy(rng);
    x["freepoor"](i) = freepoor(rng);
    x["freerepa"](i) = freerepa(rng);
    x["illness"](i) = std::min(5, illness(rng));
    x["actdays"](i) = active(rng) ? days(rng) : 0;
    x["hscore"](i) = std::min(12, hscore(rng));
    x["chcond"](i) = chcond(rng);
    const Eigen::VectorXd b = mvn_sample(sigma, rng);
    for (int r = 0; r < 5; ++r) {
      const double eta = b0(r) + 0.15 * x["sex"](i) + 0.6 * x["age"](i) - 0.2 * x["income"](i) +
                         0.1 * x["levyplus"](i) - 0.1 * x["freepoor"](i) + 0.2 * x["freerepa"](i) +
                         slope_ill(r) * x["illness"](i) + slope_act(r) * x["actdays"](i) + 0.04 * x["hscore"](i) +
                         0.1 * x["chcond"](i) + b(r);
      d.Y(i, r) = sample(Family{FamilyKind::NegBin2}, std::exp(eta), 2.0, rng);
    }
  }
  d.covariates = std::move(x);
  return d;
}

Dataset ant(Rng& rng) {
  const int n = 30, k = 41;
  Dataset d;
  for (int r = 0; r < k; ++r) d.response_names.push_back((r < 9 ? "sp0" : "sp") + std::to_string(r + 1));
  d.Y.resize(n, k);
  std::uniform_real_distribution<double> unif(0, 1);
  std::map<std::string, Eigen::VectorXd> x;
  for (const char* c : {"Bare.ground", "Canopy.cover", "Shrub.cover", "Volume.lying.CWD", "Feral.mammal.dung"})
    x[c] = Eigen::VectorXd(n);
  for (int i = 0; i < n; ++i) {
    x["Bare.ground"](i) = std::round(60 * unif(rng));
    x["Canopy.cover"](i) = std::round(90 * unif(rng) * unif(rng));
    x["Shrub.cover"](i) = std::round(70 * unif(rng));
    x["Volume.lying.CWD"](i) = std::round(600 * unif(rng) * unif(rng));
    x["Feral.mammal.dung"](i) = std::round(20 * unif(rng));
  }
  std::normal_distribution<double> z;
  Eigen::VectorXd site(n);
  for (int i = 0; i < n; ++i) site(i) = 0.5 * z(rng);
  for (int r = 0; r < k; ++r) {
    const double base = std::log(0.2 + 8 * unif(rng) * unif(rng));
    const double slope = 0.02 * z(rng);
    for (int i = 0; i < n; ++i) {
      const double eta = base + slope * (x["Bare.ground"](i) - 30) + site(i) + 0.6 * z(rng);
      d.Y(i, r) = sample(Family{FamilyKind::NegBin2}, std::exp(eta), 1.5, rng);
    }
    if (d.Y.col(r).sum() == 0) d.Y(r % n, r) = 1;  // every species observed somewhere
  }
  d.covariates = std::move(x);
  return d;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: mglmm_fixtures <out-dir> [seed]\n";
    return 2;
  }
  const fs::path dir(argv[1]);
  const unsigned long long seed = argc > 2 ? std::stoull(argv[2]) : 2390;
  fs::create_directories(dir);
  Rng rng(seed);
  const Dataset a = ahs(rng);
  write_csv((dir / "ahs_synthetic.csv").string(), a);
  const std::vector<int> rows = srs_indices(a.n(), 300, 2390);
  write_csv((dir / "ahs_srs300.csv").string(), a.subset(rows));
  write_csv((dir / "ant_synthetic.csv").string(), ant(rng));
  return 0;
}
