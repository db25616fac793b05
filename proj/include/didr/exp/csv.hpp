#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "didr/errors.hpp"
#include "didr/exp/config.hpp"

namespace didr::exp {

/// RFC-4180 field: quoted when it holds a comma, quote, CR or LF; quotes doubled.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

using CsvCell = std::variant<double, std::int64_t, std::string>;

inline std::string csv_cell(const CsvCell& c) {
  if (const auto* d = std::get_if<double>(&c)) return detail::format_double(*d);
  if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  return csv_field(std::get<std::string>(c));
}

/// Headered CSV with CRLF line ends.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
      : out_(path, std::ios::binary), columns_(header.size()) {
    if (!out_) throw ConfigError("cannot write " + path.string());
    write_line(header);
  }

  void row(const std::vector<CsvCell>& cells) {
    if (cells.size() != columns_) throw UsageError("csv row has " + std::to_string(cells.size()) + " cells");
    std::vector<std::string> text;
    text.reserve(cells.size());
    for (const auto& c : cells) text.push_back(csv_cell(c));
    write_line(text, false);
  }

 private:
  void write_line(const std::vector<std::string>& cells, bool quote = true) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << (quote ? csv_field(cells[i]) : cells[i]);
    }
    out_ << "\r\n";
    out_.flush();
  }

  std::ofstream out_;
  std::size_t columns_;
};

}  // namespace didr::exp
