#include "mglmm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mglmm {

using json = nlohmann::json;

void ConstraintSet::validate() const {
  if (fixed_variance && shared_variance)
    throw InputError("constraints: fixed_variance and shared_variance are mutually exclusive");
  if (fixed_variance && !(*fixed_variance > 0))
    throw InputError("constraints: fixed_variance must be positive");
  if (fixed_dispersion && !(*fixed_dispersion > 0))
    throw InputError("constraints: fixed_dispersion must be positive");
}

double default_fixed_dispersion(Family family) {
  return family.kind == FamilyKind::ComPoissonMu ? 1.5 : 1.0;
}

std::vector<std::string> ResponseSpec::coef_names() const {
  std::vector<std::string> out;
  if (intercept) out.push_back("(Intercept)");
  out.insert(out.end(), covariates.begin(), covariates.end());
  return out;
}

void ModelSpec::validate() const {
  if (responses.empty()) throw InputError("model spec: no responses");
  std::set<std::string> seen;
  for (const auto& r : responses) {
    if (r.name.empty()) throw InputError("model spec: response without a name");
    if (!seen.insert(r.name).second) throw InputError("model spec: duplicate response '" + r.name + "'");
    if (r.n_coef() == 0) throw InputError("model spec: response '" + r.name + "' has no coefficients");
    std::set<std::string> cov(r.covariates.begin(), r.covariates.end());
    if (cov.size() != r.covariates.size())
      throw InputError("model spec: duplicate covariate for response '" + r.name + "'");
  }
  constraints.validate();
  if (!family.has_dispersion() && constraints.fixed_dispersion)
    throw InputError("model spec: fixed_dispersion given for a family without dispersion");
}

ModelSpec ModelSpec::from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("model spec: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw InputError("model spec: top level must be an object");
  static const std::set<std::string> known{"family", "link", "responses", "covariates", "constraints", "standardize"};
  for (auto it = doc.begin(); it != doc.end(); ++it)
    if (!known.count(it.key())) throw InputError("model spec: unknown key '" + it.key() + "'");

  ModelSpec spec;
  try {
    if (!doc.contains("family")) throw InputError("model spec: missing 'family'");
    spec.family = Family::parse(doc.at("family").get<std::string>());
    if (doc.contains("link") && doc.at("link").get<std::string>() != "log")
      throw InputError("model spec: only the log link is supported");

    std::vector<std::string> default_cov;
    if (doc.contains("covariates")) default_cov = doc.at("covariates").get<std::vector<std::string>>();

    if (!doc.contains("responses") || !doc.at("responses").is_array())
      throw InputError("model spec: 'responses' must be an array");
    for (const auto& r : doc.at("responses")) {
      ResponseSpec rs;
      if (r.is_string()) {
        rs.name = r.get<std::string>();
        rs.covariates = default_cov;
      } else if (r.is_object()) {
        for (auto it = r.begin(); it != r.end(); ++it)
          if (it.key() != "name" && it.key() != "intercept" && it.key() != "covariates")
            throw InputError("model spec: unknown response key '" + it.key() + "'");
        rs.name = r.at("name").get<std::string>();
        rs.intercept = r.value("intercept", true);
        rs.covariates = r.contains("covariates") ? r.at("covariates").get<std::vector<std::string>>()
                                                 : default_cov;
      } else {
        throw InputError("model spec: each response must be a name or an object");
      }
      spec.responses.push_back(std::move(rs));
    }

    if (doc.contains("constraints")) {
      const auto& c = doc.at("constraints");
      for (auto it = c.begin(); it != c.end(); ++it) {
        const auto& key = it.key();
        if (key != "fix_rho_zero" && key != "fixed_dispersion" && key != "fixed_variance" &&
            key != "shared_variance")
          throw InputError("model spec: unknown constraint '" + key + "'");
      }
      spec.constraints.fix_rho_zero = c.value("fix_rho_zero", false);
      spec.constraints.shared_variance = c.value("shared_variance", false);
      if (c.contains("fixed_dispersion") && !c.at("fixed_dispersion").is_null()) {
        const auto& v = c.at("fixed_dispersion");
        if (v.is_boolean()) {
          if (v.get<bool>()) spec.constraints.fixed_dispersion = default_fixed_dispersion(spec.family);
        } else {
          spec.constraints.fixed_dispersion = v.get<double>();
        }
      }
      if (c.contains("fixed_variance") && !c.at("fixed_variance").is_null())
        spec.constraints.fixed_variance = c.at("fixed_variance").get<double>();
    }
    spec.standardize = doc.value("standardize", false);
  } catch (const json::exception& e) {
    throw InputError(std::string("model spec: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw InputError(std::string("model spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

std::string ModelSpec::to_json_text() const {
  json doc;
  doc["family"] = family.name();
  doc["responses"] = json::array();
  for (const auto& r : responses)
    doc["responses"].push_back({{"name", r.name}, {"intercept", r.intercept}, {"covariates", r.covariates}});
  json c;
  c["fix_rho_zero"] = constraints.fix_rho_zero;
  c["shared_variance"] = constraints.shared_variance;
  c["fixed_dispersion"] = constraints.fixed_dispersion ? json(*constraints.fixed_dispersion) : json(nullptr);
  c["fixed_variance"] = constraints.fixed_variance ? json(*constraints.fixed_variance) : json(nullptr);
  doc["constraints"] = c;
  doc["standardize"] = standardize;
  return doc.dump(2);
}

ModelSpec load_model_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open model spec '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ModelSpec::from_json_text(ss.str());
}

void Dataset::validate() const {
  if (static_cast<int>(response_names.size()) != k())
    throw InputError("dataset: response names do not match the response matrix");
  if ((Y.array() < 0).any()) throw InputError("dataset: negative response count");
  for (const auto& [name, col] : covariates) {
    if (col.size() != n()) throw InputError("dataset: covariate '" + name + "' has the wrong length");
    if (!col.allFinite()) throw InputError("dataset: covariate '" + name + "' has missing or non-finite values");
  }
}

Dataset Dataset::subset(std::span<const int> rows) const {
  Dataset out;
  out.response_names = response_names;
  out.Y.resize(static_cast<Eigen::Index>(rows.size()), k());
  for (std::size_t i = 0; i < rows.size(); ++i) out.Y.row(i) = Y.row(rows[i]);
  for (const auto& [name, col] : covariates) {
    Eigen::VectorXd c(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) c(i) = col(rows[i]);
    out.covariates.emplace(name, std::move(c));
  }
  return out;
}

Dataset Dataset::aligned_to(const ModelSpec& spec) const {
  Dataset out;
  out.covariates = covariates;
  out.Y.resize(n(), spec.k());
  for (int r = 0; r < spec.k(); ++r) {
    const auto it = std::find(response_names.begin(), response_names.end(), spec.responses[r].name);
    if (it == response_names.end())
      throw InputError("dataset: response '" + spec.responses[r].name + "' not found");
    out.Y.col(r) = Y.col(it - response_names.begin());
    out.response_names.push_back(spec.responses[r].name);
  }
  return out;
}

Design build_design(const ModelSpec& spec, const Dataset& data) {
  Design d;
  const int n = data.n();
  for (const auto& r : spec.responses) {
    Eigen::MatrixXd X(n, r.n_coef());
    int c = 0;
    if (r.intercept) X.col(c++).setOnes();
    for (const auto& name : r.covariates) {
      const auto it = data.covariates.find(name);
      if (it == data.covariates.end())
        throw InputError("design: covariate '" + name + "' (response '" + r.name + "') not in data");
      Eigen::VectorXd col = it->second;
      if (spec.standardize && n > 1) {
        const double mean = col.mean();
        const double sd = std::sqrt((col.array() - mean).square().sum() / (n - 1));
        col = (col.array() - mean) / (sd > 0 ? sd : 1.0);
      }
      X.col(c++) = col;
    }
    d.X.push_back(std::move(X));
    d.coef_names.push_back(r.coef_names());
  }
  return d;
}

ParameterLayout::ParameterLayout(const ModelSpec& spec) : spec_(spec), k_(spec.k()) {
  spec_.validate();
  const auto& c = spec_.constraints;
  int off = 0;
  for (const auto& r : spec_.responses) {
    beta_offset_.push_back(off);
    n_beta_.push_back(r.n_coef());
    for (const auto& cn : r.coef_names()) names_.push_back("beta[" + r.name + "]." + cn);
    off += r.n_coef();
  }
  beta_total_ = off;

  disp_offset_ = off;
  disp_free_ = spec_.family.has_dispersion() && !c.fixed_dispersion;
  if (disp_free_) {
    for (const auto& r : spec_.responses) names_.push_back("log_" + spec_.family.dispersion_symbol() + "[" + r.name + "]");
    off += k_;
  }

  sd_offset_ = off;
  if (c.fixed_variance) {
    n_sd_free_ = 0;
  } else if (c.shared_variance) {
    n_sd_free_ = 1;
    names_.push_back("log_sigma[shared]");
  } else {
    n_sd_free_ = k_;
    for (const auto& r : spec_.responses) names_.push_back("log_sigma[" + r.name + "]");
  }
  off += n_sd_free_;

  corr_offset_ = off;
  corr_free_ = !c.fix_rho_zero && k_ > 1;
  if (corr_free_) {
    for (const auto& [i, j] : corr_pairs(k_))
      names_.push_back("corr_raw[" + spec_.responses[i].name + "," + spec_.responses[j].name + "]");
    off += corr_count(k_);
  }
  size_ = off;
}

Eigen::VectorXd ParameterLayout::flatten(const ParameterVector& p) const {
  if (static_cast<int>(p.beta.size()) != k_ || p.cov.dim() != k_)
    throw InputError("flatten: parameter shapes do not match the model");
  Eigen::VectorXd flat(size_);
  for (int r = 0; r < k_; ++r) {
    if (p.beta[r].size() != n_beta_[r]) throw InputError("flatten: beta block has the wrong length");
    flat.segment(beta_offset_[r], n_beta_[r]) = p.beta[r];
  }
  if (disp_free_) {
    if (p.log_disp.size() != k_) throw InputError("flatten: dispersion block has the wrong length");
    flat.segment(disp_offset_, k_) = p.log_disp;
  }
  if (n_sd_free_ == 1) flat(sd_offset_) = p.cov.log_sd(0);
  else if (n_sd_free_ == k_) flat.segment(sd_offset_, k_) = p.cov.log_sd;
  if (corr_free_) flat.segment(corr_offset_, corr_count(k_)) = p.cov.corr_raw;
  return flat;
}

ParameterVector ParameterLayout::unflatten(const Eigen::VectorXd& flat) const {
  if (flat.size() != size_)
    throw InputError("unflatten: expected " + std::to_string(size_) + " coordinates, got " +
                     std::to_string(flat.size()));
  const auto& c = spec_.constraints;
  ParameterVector p;
  for (int r = 0; r < k_; ++r) p.beta.push_back(flat.segment(beta_offset_[r], n_beta_[r]));
  if (spec_.family.has_dispersion()) {
    if (disp_free_) p.log_disp = flat.segment(disp_offset_, k_);
    else p.log_disp = Eigen::VectorXd::Constant(k_, std::log(*c.fixed_dispersion));
  }
  if (c.fixed_variance) p.cov.log_sd = Eigen::VectorXd::Constant(k_, 0.5 * std::log(*c.fixed_variance));
  else if (n_sd_free_ == 1) p.cov.log_sd = Eigen::VectorXd::Constant(k_, flat(sd_offset_));
  else p.cov.log_sd = flat.segment(sd_offset_, k_);
  p.cov.corr_raw = corr_free_ ? Eigen::VectorXd(flat.segment(corr_offset_, corr_count(k_)))
                              : Eigen::VectorXd::Zero(corr_count(k_));
  return p;
}

ParameterVector ParameterLayout::constrained(ParameterVector p) const {
  return unflatten(flatten(p));
}

Eigen::VectorXd flatten(const ParameterVector& params, const ModelSpec& spec) {
  return ParameterLayout(spec).flatten(params);
}

ParameterVector unflatten(const Eigen::VectorXd& flat, const ModelSpec& spec) {
  return ParameterLayout(spec).unflatten(flat);
}

Eigen::MatrixXd linear_predictor(const Design& design, const ParameterVector& params) {
  const int k = static_cast<int>(design.X.size());
  const Eigen::Index n = k > 0 ? design.X[0].rows() : 0;
  Eigen::MatrixXd eta(n, k);
  for (int r = 0; r < k; ++r) eta.col(r) = design.X[r] * params.beta[r];
  return eta;
}

CondLoglik cond_loglik(const ModelSpec& spec, const ParameterVector& params, const Dataset& data,
                       const Eigen::MatrixXd& b, const CmpSeriesControl& series) {
  const Dataset aligned = data.aligned_to(spec);
  const Design design = build_design(spec, aligned);
  const Eigen::MatrixXd eta0 = linear_predictor(design, params);
  const int n = aligned.n();
  const int k = spec.k();
  if (b.rows() != n || b.cols() != k) throw InputError("cond_loglik: b must be n x k");
  CondLoglik out;
  out.subjects.resize(n);
  for (int i = 0; i < n; ++i) {
    auto& s = out.subjects[i];
    s.grad.resize(k);
    s.hess = Eigen::MatrixXd::Zero(k, k);
    for (int r = 0; r < k; ++r) {
      const double log_disp = spec.family.has_dispersion() ? params.log_disp(r) : 0.0;
      const EtaDerivs d = eta_derivs(spec.family, aligned.Y(i, r), eta0(i, r) + b(i, r), log_disp,
                                     DerivOrder::Inner, series);
      s.value += d.value;
      s.grad(r) = d.d1;
      s.hess(r, r) = d.d2;
    }
  }
  for (const auto& s : out.subjects) out.value += s.value;
  return out;
}

}  // namespace mglmm
