#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "gcm/types.hpp"

namespace gcm {

namespace csv_detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

/// Shortest round-trip decimal representation, so emitted files are
/// byte-stable across runs.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace csv_detail

struct IngestReport {
  LongitudinalDataset data;
  std::vector<std::string> dropped_subjects;  // rows with every occasion missing
  Eigen::VectorXd occasion_missing_rates;     // computed before dropping
};

/// Reads a wide-format dataset: header `id,y1,...,yT`, literal `NA` marking
/// missing cells. Subjects with no observed occasion are dropped and
/// reported. Malformed rows raise DataError.
inline IngestReport read_wide_csv(std::istream& in, const std::string& origin = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(origin + ": empty file");
  auto header = csv_detail::split_line(line);
  for (auto& h : header) h = csv_detail::trim(h);
  if (header.size() < 3 || header[0] != "id")
    throw DataError(origin + ": header must be id,y1,...,yT");
  const int T = static_cast<int>(header.size()) - 1;
  for (int t = 0; t < T; ++t)
    if (header[t + 1] != "y" + std::to_string(t + 1))
      throw DataError(origin + ": unexpected column name '" + header[t + 1] + "'");

  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> masks;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv_detail::trim(line).empty()) continue;
    auto fields = csv_detail::split_line(line);
    if (static_cast<int>(fields.size()) != T + 1)
      throw DataError(origin + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(T + 1) + " fields, got " + std::to_string(fields.size()));
    ids.push_back(csv_detail::trim(fields[0]));
    std::vector<double> vals(T);
    std::vector<bool> obs(T);
    for (int t = 0; t < T; ++t) {
      const std::string cell = csv_detail::trim(fields[t + 1]);
      if (cell == "NA" || cell.empty()) {
        vals[t] = std::numeric_limits<double>::quiet_NaN();
        obs[t] = false;
        continue;
      }
      try {
        std::size_t pos = 0;
        vals[t] = std::stod(cell, &pos);
        if (pos != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw DataError(origin + ":" + std::to_string(line_no) + ": non-numeric cell '" + cell +
                        "'");
      }
      obs[t] = true;
    }
    rows.push_back(std::move(vals));
    masks.push_back(std::move(obs));
  }
  if (rows.empty()) throw DataError(origin + ": no data rows");

  const int n_all = static_cast<int>(rows.size());
  IngestReport report;
  report.occasion_missing_rates.resize(T);
  for (int t = 0; t < T; ++t) {
    int miss = 0;
    for (int i = 0; i < n_all; ++i) miss += masks[i][t] ? 0 : 1;
    report.occasion_missing_rates(t) = static_cast<double>(miss) / n_all;
  }

  std::vector<int> keep;
  for (int i = 0; i < n_all; ++i) {
    bool any = false;
    for (int t = 0; t < T; ++t) any = any || masks[i][t];
    if (any)
      keep.push_back(i);
    else
      report.dropped_subjects.push_back(ids[i]);
  }
  if (keep.empty()) throw DataError(origin + ": every subject is fully missing");

  auto& data = report.data;
  data.values.resize(keep.size(), T);
  data.mask.resize(keep.size(), T);
  data.subject_ids.reserve(keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const int i = keep[k];
    data.subject_ids.push_back(ids[i]);
    for (int t = 0; t < T; ++t) {
      data.values(k, t) = rows[i][t];
      data.mask(k, t) = masks[i][t];
    }
  }
  data.validate();
  return report;
}

inline IngestReport read_wide_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  return read_wide_csv(in, path);
}

inline void write_wide_csv(std::ostream& out, const LongitudinalDataset& data) {
  out << "id";
  for (int t = 1; t <= data.occasions(); ++t) out << ",y" << t;
  out << "\n";
  for (int i = 0; i < data.n(); ++i) {
    out << (data.subject_ids.empty() ? "s" + std::to_string(i + 1) : data.subject_ids[i]);
    for (int t = 0; t < data.occasions(); ++t) {
      out << ',';
      if (data.mask(i, t))
        out << csv_detail::format_double(data.values(i, t));
      else
        out << "NA";
    }
    out << "\n";
  }
}

inline void write_wide_csv_file(const std::string& path, const LongitudinalDataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  write_wide_csv(out, data);
}

// Draw files: one column per parameter, one row per retained iteration.

inline void write_draws_csv(std::ostream& out, const std::vector<std::string>& names,
                            const Eigen::MatrixXd& draws) {
  for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
  out << "\n";
  for (int i = 0; i < draws.rows(); ++i) {
    for (int j = 0; j < draws.cols(); ++j)
      out << (j ? "," : "") << csv_detail::format_double(draws(i, j));
    out << "\n";
  }
}

struct DrawsFile {
  std::vector<std::string> names;
  Eigen::MatrixXd draws;
};

inline DrawsFile read_draws_csv(std::istream& in, const std::string& origin = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(origin + ": empty draws file");
  DrawsFile out;
  for (auto& name : csv_detail::split_line(line)) out.names.push_back(csv_detail::trim(name));
  if (out.names.empty()) throw DataError(origin + ": no columns");
  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv_detail::trim(line).empty()) continue;
    auto fields = csv_detail::split_line(line);
    if (fields.size() != out.names.size())
      throw DataError(origin + ":" + std::to_string(line_no) + ": ragged row");
    std::vector<double> vals(fields.size());
    for (std::size_t j = 0; j < fields.size(); ++j) {
      try {
        vals[j] = std::stod(csv_detail::trim(fields[j]));
      } catch (const std::exception&) {
        throw DataError(origin + ":" + std::to_string(line_no) + ": non-numeric cell");
      }
    }
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw DataError(origin + ": no draws");
  out.draws.resize(rows.size(), out.names.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < out.names.size(); ++j) out.draws(i, j) = rows[i][j];
  return out;
}

inline DrawsFile read_draws_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  return read_draws_csv(in, path);
}

}  // namespace gcm
