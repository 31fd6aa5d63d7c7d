#pragma once

#include "psmf/estimation.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace psmf {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

// nullopt for missing cells; throws on garbage.
inline std::optional<double> parse_cell(const std::string& raw, bool& ok) {
  const std::string s = trim(raw);
  ok = true;
  if (s.empty() || s == "NaN" || s == "nan") return std::nullopt;
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    ok = false;
    return std::nullopt;
  }
  return v;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "NaN";
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::contract, "cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace detail

/// Parse a time-major CSV (rows = time steps). Empty cells and NaN are missing. A first line with a
/// non-numeric cell is treated as a header. Returns the d x n representation.
inline DataMatrix parse_matrix(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> observed;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    std::vector<double> values(cells.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<bool> obs(cells.size(), false);
    bool numeric = true;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      bool ok = true;
      const auto v = detail::parse_cell(cells[c], ok);
      if (!ok) {
        numeric = false;
        break;
      }
      if (v) {
        values[c] = *v;
        obs[c] = true;
      }
    }
    if (!numeric) {
      if (rows.empty() && width == 0) {
        width = cells.size();  // header
        continue;
      }
      throw ParseError("non-numeric cell", line_no);
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw ParseError("expected " + std::to_string(width) + " columns, found " + std::to_string(cells.size()),
                       line_no);
    rows.push_back(std::move(values));
    observed.push_back(std::move(obs));
  }
  if (width == 0) throw ContractError("CSV has zero columns");
  if (rows.empty()) throw ContractError("CSV has no data rows");

  DataMatrix out;
  out.values.resize(static_cast<Index>(width), static_cast<Index>(rows.size()));
  out.mask.resize(static_cast<Index>(width), static_cast<Index>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t i = 0; i < width; ++i) {
      out.values(static_cast<Index>(i), static_cast<Index>(t)) = rows[t][i];
      out.mask(static_cast<Index>(i), static_cast<Index>(t)) = observed[t][i];
    }
  return out;
}

inline DataMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open data file " + path.string());
  return parse_matrix(in);
}

/// Write a d x n matrix time-major; unobserved entries (mask false) are written as empty cells.
inline void write_matrix(std::ostream& out, const Matrix& values, const MaskMatrix* mask = nullptr,
                         const std::vector<std::string>& header = {}) {
  if (!header.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
  }
  for (Index t = 0; t < values.cols(); ++t) {
    for (Index i = 0; i < values.rows(); ++i) {
      if (i) out << ',';
      if (!mask || (*mask)(i, t)) out << detail::format_double(values(i, t));
    }
    out << '\n';
  }
}

inline void write_matrix(const std::filesystem::path& path, const Matrix& values, const MaskMatrix* mask = nullptr,
                         const std::vector<std::string>& header = {}) {
  auto out = detail::open_output(path);
  write_matrix(out, values, mask, header);
}

inline void write_data(const std::filesystem::path& path, const DataMatrix& data) {
  write_matrix(path, data.values, &data.mask);
}

inline void write_trace(std::ostream& out, const std::vector<FilterTraceEntry>& trace, bool robust) {
  out << "k,eta,innovation_norm,nll_increment,observed_count";
  if (robust) out << ",omega,phi,lambda";
  out << '\n';
  using detail::format_double;
  for (const auto& e : trace) {
    out << e.k << ',' << format_double(e.eta) << ',' << format_double(e.innovation_norm) << ','
        << format_double(e.nll_increment) << ',' << e.observed_count;
    if (robust) out << ',' << format_double(e.omega) << ',' << format_double(e.phi) << ',' << format_double(e.lambda);
    out << '\n';
  }
}

inline void write_fit_report(std::ostream& out, const FitReport& report) {
  const Index p = report.iterations.empty() ? 0 : report.iterations.front().theta.size();
  out << "iteration,total_nll,frobenius_error";
  for (Index i = 0; i < p; ++i) out << ",theta_" << i;
  out << '\n';
  for (const auto& it : report.iterations) {
    out << it.iteration << ',' << detail::format_double(it.total_nll) << ','
        << detail::format_double(it.frobenius_error);
    for (Index i = 0; i < it.theta.size(); ++i) out << ',' << detail::format_double(it.theta(i));
    out << '\n';
  }
}

}  // namespace psmf
