#include <filesystem>
#include <functional>
#include <fstream>
#include <random>
#include <string>

#include "doctest.h"
#include "mglmm/data_io.hpp"

using namespace mglmm;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mglmm_test_data_io";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const InputError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("bundled fixtures have the documented shapes") {
  const std::string dir = MGLMM_TEST_DATA;
  const Dataset ahs = load_csv(dir + "/ahs_synthetic.csv", {"Ndoc", "Nndoc", "Nadm", "Nhosp", "Nmed"},
                               {"sex", "age", "income", "levyplus", "freepoor", "freerepa", "illness", "actdays",
                                "hscore", "chcond"});
  CHECK(ahs.n() == 5190);
  CHECK(ahs.k() == 5);
  CHECK(ahs.covariates.size() == 10);
  const CsvTable ant = read_csv_file(dir + "/ant_synthetic.csv");
  std::vector<std::string> species;
  for (const auto& h : ant.header)
    if (h.rfind("sp", 0) == 0) species.push_back(h);
  const Dataset d = dataset_from_table(ant, species);
  CHECK(d.n() == 30);
  CHECK(d.k() == 41);
}

TEST_CASE("write/read round trip preserves every cell") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0, 1e3);
  std::poisson_distribution<int> p(4.0);
  Dataset d;
  d.response_names = {"a", "b"};
  d.Y.resize(50, 2);
  Eigen::VectorXd x(50), w(50);
  for (int i = 0; i < 50; ++i) {
    d.Y(i, 0) = p(rng);
    d.Y(i, 1) = p(rng) * 1000;
    x(i) = z(rng) / 3.0;
    w(i) = std::ldexp(z(rng), -60);
  }
  d.covariates["x"] = x;
  d.covariates["w"] = w;
  const fs::path path = temp_file("roundtrip.csv");
  write_csv(path.string(), d);
  const Dataset back = load_csv(path.string(), {"a", "b"}, {"w", "x"});
  CHECK(back.Y == d.Y);
  CHECK(back.covariates.at("x") == x);  // bitwise equality
  CHECK(back.covariates.at("w") == w);
  CHECK(to_csv_text(back) == to_csv_text(d));
}

TEST_CASE("unreferenced columns are ignored") {
  const fs::path path = temp_file("extra.csv");
  write_text(path, "y,junk,x\n1,abc,0.5\n2,,1.5\n");
  const Dataset d = load_csv(path.string(), {"y"}, {"x"});
  CHECK(d.n() == 2);
  CHECK(d.covariates.count("junk") == 0);
}

TEST_CASE("every invalid cell is listed") {
  const fs::path path = temp_file("bad.csv");
  write_text(path, "y1,y2,x\n1,2,0.1\n-1,2,0.2\n3,2.5,0.3\n4,5,nan\n,1,0.4\n");
  const std::string msg = error_of([&] { load_csv(path.string(), {"y1", "y2"}, {"x"}); });
  CHECK(msg.find("4 invalid cell") != std::string::npos);
  CHECK(msg.find("line 3, column 'y1'") != std::string::npos);
  CHECK(msg.find("line 4, column 'y2'") != std::string::npos);
  CHECK(msg.find("line 5, column 'x'") != std::string::npos);
  CHECK(msg.find("line 6, column 'y1'") != std::string::npos);

  write_text(path, "y1,y2\n1,2\n1,2,3\n4\n");
  const std::string ragged = error_of([&] { read_csv_file(path.string()); });
  CHECK(ragged.find("line 3") != std::string::npos);
  CHECK(ragged.find("line 4") != std::string::npos);

  write_text(path, "y1,y1\n1,2\n");
  CHECK(error_of([&] { read_csv_file(path.string()); }).find("duplicate") != std::string::npos);

  write_text(path, "y1,y2\n1,2\n");
  const std::string missing = error_of([&] { load_csv(path.string(), {"y1", "y3"}, {"z"}); });
  CHECK(missing.find("'y3'") != std::string::npos);
  CHECK(missing.find("'z'") != std::string::npos);
}

TEST_CASE("empty input is a structured error") {
  const fs::path path = temp_file("empty.csv");
  write_text(path, "");
  CHECK_THROWS_AS(load_csv(path.string(), {"y"}), InputError);
  write_text(path, "y\n");
  CHECK_THROWS_AS(load_csv(path.string(), {"y"}), InputError);
  CHECK_THROWS_AS(load_csv((fs::temp_directory_path() / "no_such_file.csv").string(), {"y"}), InputError);
}

TEST_CASE("quoted fields, CRLF and BOM") {
  const CsvTable t = parse_csv("\xEF\xBB\xBF\"a\",b\r\n\"1\",\"x,y\"\r\n");
  CHECK(t.header == std::vector<std::string>{"a", "b"});
  CHECK(t.rows[0][1] == "x,y");
}

TEST_CASE("describe: per-response summaries and GDI") {
  Dataset d;
  d.response_names = {"c", "v"};
  d.Y.resize(30, 2);
  for (int i = 0; i < 30; ++i) {
    d.Y(i, 0) = 3;
    d.Y(i, 1) = i < 20 ? 0 : (i < 27 ? 1 : (i < 29 ? 2 : 5));
  }
  const Description desc = describe(d, 50, 2390, 2);
  CHECK(desc.responses[0].variance == 0);
  CHECK(desc.responses[0].di == 0);
  CHECK(desc.responses[1].mean == doctest::Approx(16.0 / 30));
  CHECK(desc.responses[1].di == doctest::Approx(2.0345).epsilon(1e-4));
  CHECK(desc.bootstrap == 50);
  CHECK(desc.seed == 2390);
  CHECK(format_description(desc).find("GDI") != std::string::npos);
  CHECK(gdi_csv(desc).rfind("gdi,se,se_method,resamples,seed\n", 0) == 0);
  CHECK(description_csv(desc) == description_csv(describe(d, 50, 2390, 1)));
}

TEST_CASE("describe on large Poisson samples gives DI near one") {
  std::mt19937_64 rng(4);
  Dataset d;
  d.response_names = {"a", "b", "c"};
  d.Y.resize(20000, 3);
  for (int r = 0; r < 3; ++r) {
    std::poisson_distribution<int> p(0.3 + 3 * r);
    for (int i = 0; i < 20000; ++i) d.Y(i, r) = p(rng);
  }
  const Description desc = describe(d, 20);
  for (const auto& s : desc.responses) {
    CHECK(s.di > 0.9);
    CHECK(s.di < 1.1);
  }
}
