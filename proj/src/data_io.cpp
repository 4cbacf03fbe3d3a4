#include "mglmm/data_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "mglmm/report.hpp"

namespace mglmm {

int CsvTable::column(const std::string& name) const {
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == name) return static_cast<int>(j);
  return -1;
}

namespace {

std::vector<std::string> split_line(const std::string& line, bool& ok) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  ok = true;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) ok = false;
  cells.push_back(std::move(cur));
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::vector<std::string> problems;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (trim(line).empty()) continue;
    bool ok = true;
    auto cells = split_line(line, ok);
    for (auto& c : cells) c = trim(c);
    if (!ok) {
      problems.push_back("line " + std::to_string(lineno) + ": unterminated quote");
      continue;
    }
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
      std::set<std::string> seen;
      for (const auto& h : t.header)
        if (!seen.insert(h).second) problems.push_back("header: duplicate column '" + h + "'");
      continue;
    }
    if (cells.size() != t.header.size()) {
      problems.push_back("line " + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                         " fields, found " + std::to_string(cells.size()));
      continue;
    }
    t.rows.push_back(std::move(cells));
  }
  if (!have_header) throw InputError("csv: file is empty (no header row)");
  if (!problems.empty()) {
    std::string msg = "csv: malformed input";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InputError(msg);
  }
  return t;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("csv: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

Dataset dataset_from_table(const CsvTable& table, const std::vector<std::string>& response_columns,
                           const std::vector<std::string>& covariate_columns) {
  if (response_columns.empty()) throw InputError("csv: no response columns requested");
  const std::vector<std::string>& covs = covariate_columns;
  std::vector<std::string> problems;
  auto locate = [&](const std::vector<std::string>& names) {
    std::vector<int> idx;
    for (const auto& nm : names) {
      const int j = table.column(nm);
      if (j < 0) problems.push_back("column '" + nm + "' not found in header");
      idx.push_back(j);
    }
    return idx;
  };
  const std::vector<int> ridx = locate(response_columns);
  const std::vector<int> cidx = locate(covs);
  if (!problems.empty()) {
    std::string msg = "csv: missing columns";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InputError(msg);
  }
  if (table.rows.empty()) throw InputError("csv: no data rows");

  const int n = static_cast<int>(table.rows.size());
  Dataset d;
  d.response_names = response_columns;
  d.Y.resize(n, static_cast<int>(ridx.size()));
  std::vector<Eigen::VectorXd> cov(cidx.size(), Eigen::VectorXd(n));
  auto where = [&](int i, const std::string& col) {
    return "line " + std::to_string(i + 2) + ", column '" + col + "'";
  };
  for (int i = 0; i < n; ++i) {
    const auto& row = table.rows[i];
    for (std::size_t r = 0; r < ridx.size(); ++r) {
      const std::string& cell = row[ridx[r]];
      long long v = -1;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty()) problems.push_back(where(i, response_columns[r]) + ": missing response");
      else if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        problems.push_back(where(i, response_columns[r]) + ": '" + cell + "' is not an integer count");
      else if (v < 0) problems.push_back(where(i, response_columns[r]) + ": negative count " + cell);
      else if (v > 1000000000LL) problems.push_back(where(i, response_columns[r]) + ": count out of range");
      else d.Y(i, static_cast<int>(r)) = static_cast<int>(v);
    }
    for (std::size_t c = 0; c < cidx.size(); ++c) {
      const std::string& cell = row[cidx[c]];
      double v = 0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty()) problems.push_back(where(i, covs[c]) + ": missing covariate");
      else if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || !std::isfinite(v))
        problems.push_back(where(i, covs[c]) + ": '" + cell + "' is not a finite number");
      else cov[c](i) = v;
    }
  }
  if (!problems.empty()) {
    std::string msg = "csv: " + std::to_string(problems.size()) + " invalid cell(s)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InputError(msg);
  }
  for (std::size_t c = 0; c < cidx.size(); ++c) d.covariates[covs[c]] = std::move(cov[c]);
  d.validate();
  return d;
}

Dataset load_csv(const std::string& path, const std::vector<std::string>& response_columns,
                 const std::vector<std::string>& covariate_columns) {
  return dataset_from_table(read_csv_file(path), response_columns, covariate_columns);
}

std::string to_csv_text(const Dataset& data) {
  std::ostringstream out;
  bool first = true;
  for (const auto& r : data.response_names) {
    out << (first ? "" : ",") << r;
    first = false;
  }
  for (const auto& [name, col] : data.covariates) out << "," << name;
  out << "\n";
  for (int i = 0; i < data.n(); ++i) {
    for (int r = 0; r < data.k(); ++r) out << (r ? "," : "") << data.Y(i, r);
    for (const auto& [name, col] : data.covariates) out << "," << fmt_double(col(i));
    out << "\n";
  }
  return out.str();
}

void write_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("csv: cannot write '" + path + "'");
  out << to_csv_text(data);
}

Description describe(const Dataset& data, int bootstrap, unsigned long long seed, int threads) {
  Description d;
  for (int r = 0; r < data.k(); ++r) {
    const Eigen::VectorXi y = data.Y.col(r);
    ResponseSummary s;
    s.name = data.response_names[r];
    s.mean = y.cast<double>().mean();
    s.variance = sample_variance(y);
    s.di = dispersion_index(y);
    d.responses.push_back(s);
  }
  const GdiResult g = gdi(data.Y, bootstrap, seed, threads);
  d.gdi = g.gdi;
  d.gdi_se = g.se;
  d.bootstrap = g.resamples;
  d.seed = seed;
  return d;
}

std::string format_description(const Description& d) {
  std::size_t w = 8;
  for (const auto& r : d.responses) w = std::max(w, r.name.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(w)) << "Response" << std::right << std::setw(12) << "Mean"
      << std::setw(12) << "Variance" << std::setw(12) << "DI" << "\n";
  out << std::fixed << std::setprecision(3);
  for (const auto& r : d.responses)
    out << std::left << std::setw(static_cast<int>(w)) << r.name << std::right << std::setw(12) << r.mean
        << std::setw(12) << r.variance << std::setw(12) << r.di << "\n";
  out << "GDI = " << d.gdi << " (SE " << d.gdi_se << "; bootstrap " << d.bootstrap << " resamples, seed "
      << d.seed << ")\n";
  return out.str();
}

std::string description_csv(const Description& d) {
  std::ostringstream out;
  out << "response,mean,variance,di\n";
  for (const auto& r : d.responses)
    out << r.name << "," << fmt_double(r.mean) << "," << fmt_double(r.variance) << "," << fmt_double(r.di) << "\n";
  return out.str();
}

std::string gdi_csv(const Description& d) {
  std::ostringstream out;
  out << "gdi,se,se_method,resamples,seed\n";
  out << fmt_double(d.gdi) << "," << fmt_double(d.gdi_se) << ",bootstrap," << d.bootstrap << "," << d.seed << "\n";
  return out.str();
}

}  // namespace mglmm
