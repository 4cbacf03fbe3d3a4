#pragma once

// CSV ingestion and descriptive summaries. Files have a header row, comma
// separators and "." decimals; every referenced cell must be present.

#include <string>
#include <vector>

#include "mglmm/model.hpp"

namespace mglmm {

/// Parsed CSV text: header plus string cells, rows of equal width.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

/// Throws InputError listing every malformed row.
CsvTable parse_csv(const std::string& text);
CsvTable read_csv_file(const std::string& path);

/// Responses must be nonnegative integers and covariates finite numbers;
/// every offending cell is listed (row numbers count the header as line 1).
/// Columns not named are ignored.
Dataset load_csv(const std::string& path, const std::vector<std::string>& response_columns,
                 const std::vector<std::string>& covariate_columns = {});
Dataset dataset_from_table(const CsvTable& table, const std::vector<std::string>& response_columns,
                           const std::vector<std::string>& covariate_columns = {});

/// Responses first, then covariates in name order; values round-trip exactly.
void write_csv(const std::string& path, const Dataset& data);
std::string to_csv_text(const Dataset& data);

struct ResponseSummary {
  std::string name;
  double mean = 0;
  double variance = 0;  // n - 1 denominator
  double di = 0;
};

struct Description {
  std::vector<ResponseSummary> responses;
  double gdi = 0;
  double gdi_se = 0;
  int bootstrap = 0;
  unsigned long long seed = 0;
};

Description describe(const Dataset& data, int bootstrap = 1000, unsigned long long seed = 2390, int threads = 1);

/// Aligned text with one row per response plus the GDI line.
std::string format_description(const Description& d);
std::string description_csv(const Description& d);
/// GDI with its SE and the resampling settings used for the SE.
std::string gdi_csv(const Description& d);

}  // namespace mglmm
