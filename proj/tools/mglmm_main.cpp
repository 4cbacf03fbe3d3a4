// Command-line front end: fit, simulate, describe, compare.
// Exit codes: 0 success, 1 unexpected failure, 2 input error, 3 fit did not converge.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mglmm/data_io.hpp"
#include "mglmm/fit.hpp"
#include "mglmm/report.hpp"
#include "mglmm/sim.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mglmm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUnexpected = 1;
constexpr int kExitInput = 2;
constexpr int kExitNotConverged = 3;

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory '" + dir + "': " + ec.message());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct FitArgs {
  std::string model_path;
  std::string data_path;
  std::string family;
  bool fix_rho_zero = false;
  std::string fix_dispersion;  // "" = not requested, "default" = family default
  std::optional<double> fix_variance;
  bool shared_variance = false;
  std::optional<int> srs_size;
  unsigned long long srs_seed = 2390;
  int threads = 1;
  std::string out_dir = "fit_out";
  std::string schedule = "A,B,A,A";
  std::string gradient = "analytic";
  std::string label;
  int bootstrap = 1000;
  unsigned long long seed = 2390;
};

int run_fit(const FitArgs& a) {
  // Everything that can fail on user input is checked before any output.
  ModelSpec spec = load_model_spec(a.model_path);
  if (!a.family.empty()) spec.family = Family::parse(a.family);
  if (a.fix_rho_zero) spec.constraints.fix_rho_zero = true;
  if (!a.fix_dispersion.empty()) {
    if (!spec.family.has_dispersion()) throw InputError("--fix-dispersion: the Poisson family has no dispersion");
    if (a.fix_dispersion == "default") {
      spec.constraints.fixed_dispersion = default_fixed_dispersion(spec.family);
    } else {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(a.fix_dispersion, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != a.fix_dispersion.size()) throw InputError("--fix-dispersion: '" + a.fix_dispersion + "' is not a number");
      spec.constraints.fixed_dispersion = v;
    }
  }
  if (a.fix_variance) spec.constraints.fixed_variance = *a.fix_variance;
  if (a.shared_variance) spec.constraints.shared_variance = true;
  if (spec.constraints.fixed_dispersion && !spec.family.has_dispersion()) spec.constraints.fixed_dispersion.reset();
  spec.validate();

  std::vector<std::string> responses, covariates;
  std::set<std::string> seen;
  for (const auto& r : spec.responses) {
    responses.push_back(r.name);
    for (const auto& c : r.covariates)
      if (seen.insert(c).second) covariates.push_back(c);
  }
  const Dataset data = load_csv(a.data_path, responses, covariates);

  FitControl ctrl;
  ctrl.schedule = parse_schedule(a.schedule);
  if (a.gradient == "analytic") ctrl.gradient = GradientMode::Analytic;
  else if (a.gradient == "fd") ctrl.gradient = GradientMode::FiniteDifference;
  else throw InputError("--gradient must be 'analytic' or 'fd'");
  if (a.srs_size) {
    if (*a.srs_size < 2) throw InputError("--srs-size must be at least 2");
    ctrl.srs = true;
    ctrl.srs_size = *a.srs_size;
  }
  ctrl.srs_seed = a.srs_seed;
  ctrl.threads = std::max(1, a.threads);

  const FitResult res = fit(spec, data, ctrl);
  std::optional<Description> desc;
  try {
    desc = describe(data, a.bootstrap, a.seed, ctrl.threads);
  } catch (const InputError& e) {
    std::cerr << "note: descriptive table skipped: " << e.what() << "\n";
  }
  const std::string label = a.label.empty() ? spec.family.name() : a.label;

  make_out_dir(a.out_dir);
  const fs::path dir(a.out_dir);
  write_file(dir / "estimates.csv", estimates_csv(res));
  write_file(dir / "unconstrained.csv", unconstrained_csv(res));
  write_file(dir / "dispersion.csv", dispersion_csv(res));
  const CorrelationReport corr = correlation_report(res);
  write_file(dir / "corr.csv", correlation_csv(corr));
  write_file(dir / "corr.txt", correlation_text(corr));
  const std::vector<FitSummary> stats{summarize(res, label)};
  write_file(dir / "fitstats.csv", fitstats_csv(stats));
  write_file(dir / "trace.csv", trace_csv(res.trace));
  if (desc) {
    write_file(dir / "describe.csv", description_csv(*desc));
    write_file(dir / "gdi.csv", gdi_csv(*desc));
  }
  write_file(dir / "model.json", spec.to_json_text());

  json meta;
  meta["command"] = "fit";
  meta["label"] = label;
  meta["family"] = spec.family.name();
  meta["data"] = fs::path(a.data_path).filename().string();
  meta["n_subjects"] = res.n_subjects;
  meta["np"] = res.np;
  meta["converged"] = res.converged;
  meta["message"] = res.message;
  meta["grad_inf_norm"] = format_number(res.grad_inf_norm, 6);
  meta["hessian_positive_definite"] = res.hessian_pd;
  meta["schedule"] = schedule_string(ctrl.schedule);
  meta["outer_gradient"] = a.gradient;
  meta["outer_tol"] = ctrl.outer_tol;
  meta["srs"] = {{"enabled", ctrl.srs}, {"size", ctrl.srs_size}, {"seed", ctrl.srs_seed}};
  if (desc)
    meta["gdi_se"] = {{"method", "nonparametric bootstrap"}, {"resamples", desc->bootstrap}, {"seed", desc->seed}};
  write_file(dir / "metadata.json", meta.dump(2) + "\n");

  std::cout << fitstats_text(stats) << "\n";
  for (const auto& w : wald_ci(res)) {
    std::cout << "  " << w.name << " = " << format_number(w.estimate, 6);
    if (w.fixed) std::cout << " (fixed)";
    else if (w.se) std::cout << " (SE " << format_number(*w.se, 4) << ")";
    else std::cout << " (SE NA)";
    std::cout << "\n";
  }
  if (spec.k() > 1) std::cout << "\n" << correlation_text(corr);
  std::cout << "\n" << (res.converged ? "converged" : "NOT converged: " + res.message) << "; outputs in " << a.out_dir
            << "\n";
  return res.converged ? kExitOk : kExitNotConverged;
}

struct SimArgs {
  std::string family = "poisson";
  std::vector<int> n{1000};
  std::vector<double> rho{0.5};
  bool grid = false;
  unsigned long long seed = 2390;
  int target = 100;
  std::optional<int> max_replicates;
  int threads = 1;
  std::string out_dir = "sim_out";
  std::string schedule = "A,B,A,A";
};

int run_simulate(const SimArgs& a) {
  const Family family = Family::parse(a.family);
  std::vector<int> ns = a.grid ? std::vector<int>{100, 250, 500, 1000} : a.n;
  std::vector<double> rhos = a.grid ? std::vector<double>{-0.5, 0.0, 0.5} : a.rho;
  std::vector<ScenarioConfig> cells;
  for (int n : ns)
    for (double rho : rhos) {
      ScenarioConfig c = ScenarioConfig::standard(family, n, rho);
      c.seed = a.seed;
      c.target_valid = a.target;
      if (a.max_replicates) c.max_replicates = *a.max_replicates;
      c.validate();
      cells.push_back(c);
    }
  SimControl ctrl;
  ctrl.fit.schedule = parse_schedule(a.schedule);
  ctrl.threads = std::max(1, a.threads);

  std::vector<ScenarioSummary> out;
  for (const auto& c : cells) {
    std::cerr << "scenario " << family.name() << " n=" << c.n << " rho=" << c.rho << " ..." << std::endl;
    out.push_back(run_scenario(c, ctrl));
    const auto& s = out.back();
    std::cerr << "  valid " << s.valid << " of " << s.generated << (s.complete ? "" : " (cap reached)") << std::endl;
  }
  make_out_dir(a.out_dir);
  const fs::path dir(a.out_dir);
  write_file(dir / "summary.csv", summary_csv(out));
  write_file(dir / "exclusions.csv", exclusions_csv(out));
  write_file(dir / "replicates.csv", replicates_csv(out));
  json meta;
  meta["command"] = "simulate";
  meta["family"] = family.name();
  meta["seed"] = a.seed;
  meta["replicate_seed_rule"] = "splitmix64(seed, replicate index)";
  meta["target_valid"] = a.target;
  meta["schedule"] = schedule_string(ctrl.fit.schedule);
  meta["cells"] = json::array();
  for (const auto& s : out)
    meta["cells"].push_back({{"n", s.config.n},
                             {"rho", s.config.rho},
                             {"generated", s.generated},
                             {"valid", s.valid},
                             {"max_replicates", s.config.max_replicates},
                             {"complete", s.complete}});
  write_file(dir / "metadata.json", meta.dump(2) + "\n");
  std::cout << summary_csv(out);
  bool complete = true;
  for (const auto& s : out) complete = complete && s.complete;
  return complete ? kExitOk : kExitNotConverged;
}

struct DescribeArgs {
  std::string data_path;
  std::string responses;
  int bootstrap = 1000;
  unsigned long long seed = 2390;
  int threads = 1;
  std::string out_dir;
};

int run_describe(const DescribeArgs& a) {
  const CsvTable table = read_csv_file(a.data_path);
  std::vector<std::string> responses = split_list(a.responses);
  if (responses.empty()) throw InputError("--responses: at least one column is required");
  const Dataset data = dataset_from_table(table, responses, {});
  const Description d = describe(data, a.bootstrap, a.seed, std::max(1, a.threads));
  std::cout << format_description(d);
  if (!a.out_dir.empty()) {
    make_out_dir(a.out_dir);
    write_file(fs::path(a.out_dir) / "describe.csv", description_csv(d));
    write_file(fs::path(a.out_dir) / "gdi.csv", gdi_csv(d));
  }
  return kExitOk;
}

FitSummary load_summary(const std::string& dir_text) {
  const fs::path dir(dir_text);
  const CsvTable t = parse_csv(read_file(dir / "fitstats.csv"));
  if (t.rows.size() != 1) throw InputError("compare: '" + dir_text + "/fitstats.csv' must hold exactly one model");
  auto cell = [&](const std::string& name) {
    const int j = t.column(name);
    if (j < 0) throw InputError("compare: '" + dir_text + "/fitstats.csv' lacks column " + name);
    return t.rows[0][j];
  };
  FitSummary s;
  s.label = cell("model");
  s.spec = load_model_spec((dir / "model.json").string());
  try {
    s.loglik = std::stod(cell("logLik"));
    s.np = std::stoi(cell("np"));
    s.n = std::stoi(cell("n"));
  } catch (const std::exception&) {
    throw InputError("compare: '" + dir_text + "/fitstats.csv' has non-numeric statistics");
  }
  s.converged = cell("converged") == "true";
  return s;
}

int run_compare(const std::vector<std::string>& dirs, const std::string& out_dir) {
  std::vector<FitSummary> fits;
  std::set<std::string> labels;
  for (const auto& d : dirs) {
    fits.push_back(load_summary(d));
    if (!labels.insert(fits.back().label).second) fits.back().label += " (" + d + ")";
  }
  const Comparison c = compare(fits);
  std::cout << comparison_text(c);
  if (!out_dir.empty()) {
    make_out_dir(out_dir);
    write_file(fs::path(out_dir) / "compare.csv", fitstats_csv(c.rows));
    write_file(fs::path(out_dir) / "lrt.csv", lrt_csv(c));
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multivariate count mixed models: Laplace maximum likelihood, simulation and reporting"};
  app.require_subcommand(1);
  app.allow_extras(false);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a model specification to a CSV dataset");
  fit_cmd->add_option("--model", fa.model_path, "Model specification (JSON)")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--data", fa.data_path, "Data file (CSV with header)")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--family", fa.family, "Override the family: poisson | nb | cmp")
      ->check(CLI::IsMember({"poisson", "nb", "cmp"}));
  fit_cmd->add_flag("--fix-rho-zero", fa.fix_rho_zero, "Fix every random-effect correlation at 0");
  auto* fix_disp = fit_cmd->add_option("--fix-dispersion", fa.fix_dispersion,
                                       "Fix the dispersion (phi or nu); without a value phi=1, nu=1.5")
                       ->expected(0, 1);
  fit_cmd->add_option("--fix-variance", fa.fix_variance, "Fix every random-effect variance at this value")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_flag("--shared-variance", fa.shared_variance, "One random-effect variance for all responses");
  fit_cmd->add_option("--srs-size", fa.srs_size, "Warm start from a fit on a random subsample of this size");
  fit_cmd->add_option("--srs-seed", fa.srs_seed, "Seed of the warm-start subsample")->capture_default_str();
  fit_cmd->add_option("--threads", fa.threads, "Worker threads (outputs do not depend on it)")->capture_default_str();
  fit_cmd->add_option("--out-dir", fa.out_dir, "Directory for report files")->capture_default_str();
  fit_cmd->add_option("--schedule", fa.schedule, "Optimizer rounds, A = trust region, B = line search")
      ->capture_default_str();
  fit_cmd->add_option("--gradient", fa.gradient, "Outer gradient: analytic | fd")
      ->check(CLI::IsMember({"analytic", "fd"}))
      ->capture_default_str();
  fit_cmd->add_option("--label", fa.label, "Model label in fitstats.csv (default: family name)");
  fit_cmd->add_option("--bootstrap", fa.bootstrap, "Bootstrap resamples for the GDI standard error")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  fit_cmd->add_option("--seed", fa.seed, "Bootstrap seed")->capture_default_str();

  SimArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "Run bivariate simulation scenarios");
  sim_cmd->add_option("--family", sa.family, "poisson | nb | cmp")
      ->check(CLI::IsMember({"poisson", "nb", "cmp"}))
      ->capture_default_str();
  sim_cmd->add_option("--n", sa.n, "Sample size(s)")->capture_default_str();
  sim_cmd->add_option("--rho", sa.rho, "True correlation(s)")->capture_default_str();
  sim_cmd->add_flag("--grid", sa.grid, "All 12 cells: n in {100,250,500,1000} x rho in {-0.5,0,0.5}");
  sim_cmd->add_option("--seed", sa.seed, "Base seed; replicate j uses a stream derived from (seed, j)")
      ->capture_default_str();
  sim_cmd->add_option("--target", sa.target, "Valid replicates per cell")->check(CLI::PositiveNumber)->capture_default_str();
  sim_cmd->add_option("--max-replicates", sa.max_replicates, "Replicate cap per cell (default 300/600/400)")
      ->check(CLI::PositiveNumber);
  sim_cmd->add_option("--threads", sa.threads, "Replicates fitted in parallel")->capture_default_str();
  sim_cmd->add_option("--out-dir", sa.out_dir, "Directory for summary files")->capture_default_str();
  sim_cmd->add_option("--schedule", sa.schedule, "Optimizer rounds per replicate")->capture_default_str();

  DescribeArgs da;
  auto* desc_cmd = app.add_subcommand("describe", "Means, variances, dispersion indices and GDI");
  desc_cmd->add_option("--data", da.data_path, "Data file (CSV with header)")->required()->check(CLI::ExistingFile);
  desc_cmd->add_option("--responses", da.responses, "Comma-separated response columns")->required();
  desc_cmd->add_option("--bootstrap", da.bootstrap, "Bootstrap resamples for the GDI SE")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  desc_cmd->add_option("--seed", da.seed, "Bootstrap seed")->capture_default_str();
  desc_cmd->add_option("--threads", da.threads, "Worker threads")->capture_default_str();
  desc_cmd->add_option("--out-dir", da.out_dir, "Also write describe.csv and gdi.csv here");

  std::vector<std::string> reports;
  std::string compare_out;
  auto* cmp_cmd = app.add_subcommand("compare", "Compare fit output directories (AIC/BIC/logLik and LRTs)");
  cmp_cmd->add_option("reports", reports, "Output directories of `fit`")->required()->check(CLI::ExistingDirectory);
  cmp_cmd->add_option("--out-dir", compare_out, "Also write compare.csv and lrt.csv here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*fit_cmd) {
      if (fix_disp->count() > 0 && fa.fix_dispersion.empty()) fa.fix_dispersion = "default";
      return run_fit(fa);
    }
    if (*sim_cmd) return run_simulate(sa);
    if (*desc_cmd) return run_describe(da);
    if (*cmp_cmd) return run_compare(reports, compare_out);
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const DomainError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUnexpected;
  }
  return kExitUnexpected;
}
