#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "mglmm/data_io.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = MGLMM_CLI;
const std::string kData = MGLMM_TEST_DATA;

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  Run r;
  const std::string cmd = kCli + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t got;
  while ((got = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, got);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "mglmm_test_cli" / name;
  fs::remove_all(d);
  return d;
}

int csv_rows(const fs::path& p) { return static_cast<int>(mglmm::read_csv_file(p.string()).rows.size()); }

std::string cell(const fs::path& p, const std::string& col, int row = 0) {
  const auto t = mglmm::read_csv_file(p.string());
  return t.rows.at(row).at(t.column(col));
}

std::string fit_args(const std::string& spec, const fs::path& out) {
  return "fit --model " + kData + "/" + spec + " --data " + kData + "/ahs_srs300.csv --bootstrap 50 --out-dir " +
         out.string();
}

}  // namespace

TEST_CASE("fit on the AHS-schema fixture writes every report") {
  const fs::path out = scratch("fit_poisson");
  const Run r = run(fit_args("ahs_poisson.json", out));
  INFO(r.out);
  CHECK(r.code == 0);
  for (const char* f : {"estimates.csv", "unconstrained.csv", "dispersion.csv", "corr.csv", "corr.txt",
                        "fitstats.csv", "trace.csv", "describe.csv", "gdi.csv", "model.json", "metadata.json"})
    CHECK(fs::exists(out / f));
  CHECK(cell(out / "fitstats.csv", "np") == "70");
  CHECK(cell(out / "fitstats.csv", "converged") == "true");
  CHECK(csv_rows(out / "trace.csv") == 4);
  CHECK(slurp(out / "metadata.json").find("\"schedule\": \"A,B,A,A\"") != std::string::npos);
  CHECK(slurp(out / "metadata.json").find("\"seed\": 2390") != std::string::npos);

  SUBCASE("--fix-rho-zero removes k(k-1)/2 coordinates") {
    const fs::path out0 = scratch("fit_poisson_rho0");
    const Run r0 = run(fit_args("ahs_poisson.json", out0) + " --fix-rho-zero --label rho0");
    INFO(r0.out);
    CHECK(r0.code == 0);
    CHECK(std::stoi(cell(out / "fitstats.csv", "np")) - std::stoi(cell(out0 / "fitstats.csv", "np")) == 10);

    const fs::path cmp = scratch("compare");
    const Run c = run("compare " + out.string() + " " + out0.string() + " --out-dir " + cmp.string());
    INFO(c.out);
    CHECK(c.code == 0);
    CHECK(csv_rows(cmp / "compare.csv") == 2);
    REQUIRE(csv_rows(cmp / "lrt.csv") == 1);
    CHECK(cell(cmp / "lrt.csv", "df") == "10");
    CHECK(cell(cmp / "lrt.csv", "reduced") == "rho0");
  }

  SUBCASE("repeated runs are byte-identical, also across worker counts") {
    const fs::path again = scratch("fit_poisson_again");
    CHECK(run(fit_args("ahs_poisson.json", again) + " --threads 3").code == 0);
    for (const char* f : {"estimates.csv", "unconstrained.csv", "corr.csv", "fitstats.csv", "trace.csv",
                          "describe.csv", "gdi.csv", "metadata.json"})
      CHECK_MESSAGE(slurp(out / f) == slurp(again / f), f);
  }
}

TEST_CASE("input errors exit with code 2 and write nothing") {
  const fs::path out = scratch("malformed");
  const Run r = run(fit_args("malformed.json", out));
  CHECK(r.code == 2);
  CHECK(r.out.find("input error") != std::string::npos);
  CHECK_FALSE(fs::exists(out));

  CHECK(run(fit_args("ahs_poisson.json", out) + " --schedule A,Z").code == 2);
  CHECK(run("fit --model " + kData + "/ahs_poisson.json --data " + kData + "/ant_synthetic.csv --out-dir " +
            out.string())
            .code == 2);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("help and unknown flags") {
  const Run h = run("fit --help");
  CHECK(h.code == 0);
  for (const char* flag : {"--model", "--data", "--family", "--fix-rho-zero", "--fix-dispersion", "--fix-variance",
                           "--shared-variance", "--srs-size", "--srs-seed", "--threads", "--out-dir", "--schedule"})
    CHECK_MESSAGE(h.out.find(flag) != std::string::npos, flag);
  const Run s = run("simulate --help");
  for (const char* flag : {"--family", "--n", "--rho", "--grid", "--seed", "--target", "--threads", "--out-dir"})
    CHECK_MESSAGE(s.out.find(flag) != std::string::npos, flag);
  CHECK(run("fit --no-such-flag").code == 2);
  CHECK(run("simulate --family poisson --bogus 1").code == 2);
  CHECK(run("").code == 2);
}

TEST_CASE("simulate: one row per parameter") {
  const fs::path out = scratch("sim_one");
  const Run r = run("simulate --family poisson --n 250 --rho -0.5 --target 3 --out-dir " + out.string());
  INFO(r.out);
  CHECK(r.code == 0);
  CHECK(csv_rows(out / "summary.csv") == 5);
  CHECK(cell(out / "summary.csv", "rho") == "-0.5");
  CHECK(fs::exists(out / "exclusions.csv"));
  CHECK(fs::exists(out / "replicates.csv"));

  const fs::path again = scratch("sim_one_threads");
  CHECK(run("simulate --family poisson --n 250 --rho -0.5 --target 3 --threads 2 --out-dir " + again.string()).code ==
        0);
  for (const char* f : {"summary.csv", "exclusions.csv", "replicates.csv", "metadata.json"})
    CHECK_MESSAGE(slurp(out / f) == slurp(again / f), f);
}

TEST_CASE("simulate: the full grid has 12 cells") {
  const fs::path out = scratch("sim_grid");
  const Run r = run("simulate --family poisson --grid --target 1 --threads 2 --out-dir " + out.string());
  INFO(r.out);
  CHECK(r.code == 0);
  CHECK(csv_rows(out / "summary.csv") == 12 * 5);
  const std::string meta = slurp(out / "metadata.json");
  int cells = 0;
  for (std::size_t at = meta.find("\"generated\""); at != std::string::npos; at = meta.find("\"generated\"", at + 1))
    ++cells;
  CHECK(cells == 12);
}

TEST_CASE("simulate: CMP cells report an exclusion histogram") {
  const fs::path out = scratch("sim_cmp");
  const Run r = run("simulate --family cmp --n 100 --rho 0.5 --target 3 --max-replicates 6 --out-dir " + out.string());
  INFO(r.out);
  CHECK((r.code == 0 || r.code == 3));
  const auto t = mglmm::read_csv_file((out / "exclusions.csv").string());
  CHECK(t.header == std::vector<std::string>{"family", "n", "rho", "reason", "count"});
  REQUIRE(!t.rows.empty());
  CHECK(t.rows[0][3] == "valid");
  int total = 0;
  for (const auto& row : t.rows) total += std::stoi(row[4]);
  CHECK(total == std::stoi(cell(out / "summary.csv", "generated")));
}

TEST_CASE("compare needs at least two reports") {
  const fs::path out = scratch("fit_small");
  REQUIRE(run("fit --model " + kData + "/bivariate.json --data " + kData + "/ahs_srs300.csv --bootstrap 20 --out-dir " +
              out.string())
              .code == 0);
  CHECK(run("compare " + out.string()).code == 2);
  CHECK(run("compare " + out.string() + " /nonexistent_dir").code == 2);
}

TEST_CASE("describe") {
  const fs::path out = scratch("describe");
  const Run r = run("describe --data " + kData + "/ahs_srs300.csv --responses Ndoc,Nmed --bootstrap 30 --out-dir " +
                    out.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("GDI") != std::string::npos);
  CHECK(csv_rows(out / "describe.csv") == 2);
  CHECK(run("describe --data " + kData + "/ahs_srs300.csv --responses Nope").code == 2);
}
