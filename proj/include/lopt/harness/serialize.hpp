#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "lopt/stability.hpp"

namespace lopt::harness {

/// Shortest round-trip decimal form; "inf", "-inf" and "nan" for non-finite values.
std::string format_number(double x);

using CsvField = std::variant<std::string, std::int64_t, double>;

/// Comma-separated writer with a mandatory header row. Fields containing
/// commas or quotes are quoted.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);

  void row(const std::vector<CsvField>& fields);
  std::size_t columns() const { return header_.size(); }

 private:
  std::ofstream out_;
  std::vector<std::string> header_;
};

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

nlohmann::json report_to_json(const StabilityReport& report);
StabilityReport report_from_json(const nlohmann::json& j);

}  // namespace lopt::harness
