#include "lopt/harness/serialize.hpp"

#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lopt::harness {

using nlohmann::json;

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

namespace {

std::string escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string field_text(const CsvField& f) {
  if (const auto* s = std::get_if<std::string>(&f)) return escape(*s);
  if (const auto* i = std::get_if<std::int64_t>(&f)) return std::to_string(*i);
  return format_number(std::get<double>(f));
}

// JSON has no non-finite numbers; they travel as strings.
json number_to_json(double x) {
  if (std::isfinite(x)) return x;
  return format_number(x);
}

double number_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  if (s == "nan") return NAN;
  throw std::invalid_argument("not a number: " + s);
}

}  // namespace

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : out_(path, std::ios::binary), header_(std::move(header)) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < header_.size(); ++i) out_ << (i ? "," : "") << escape(header_[i]);
  out_ << '\n';
}

void CsvWriter::row(const std::vector<CsvField>& fields) {
  if (fields.size() != header_.size())
    throw std::invalid_argument("CsvWriter: row width does not match header");
  for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << field_text(fields[i]);
  out_ << '\n';
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json report_to_json(const StabilityReport& r) {
  json eig = json::array();
  for (const auto& l : r.eigenvalues) eig.push_back({number_to_json(l.real()), number_to_json(l.imag())});
  json bounds = json::array();
  for (const auto& b : r.bound_checks)
    bounds.push_back({{"name", b.name},
                      {"lhs", number_to_json(b.lhs)},
                      {"rhs", number_to_json(b.rhs)},
                      {"satisfied", b.satisfied}});
  json quantities = json::array();
  for (const auto& [name, value] : r.quantities) quantities.push_back({name, number_to_json(value)});
  return {{"certificate", r.certificate},
          {"eigenvalues", eig},
          {"spectral_radius", number_to_json(r.spectral_radius)},
          {"bound_checks", bounds},
          {"certificate_verdict", to_string(r.certificate_verdict)},
          {"brute_force_verdict", to_string(r.brute_force_verdict)},
          {"quantities", quantities},
          {"notes", r.notes}};
}

StabilityReport report_from_json(const json& j) {
  StabilityReport r;
  r.certificate = j.at("certificate").get<std::string>();
  for (const auto& e : j.at("eigenvalues"))
    r.eigenvalues.emplace_back(number_from_json(e.at(0)), number_from_json(e.at(1)));
  r.spectral_radius = number_from_json(j.at("spectral_radius"));
  for (const auto& b : j.at("bound_checks"))
    r.bound_checks.push_back({b.at("name").get<std::string>(), number_from_json(b.at("lhs")),
                              number_from_json(b.at("rhs")), b.at("satisfied").get<bool>()});
  const auto cv = j.at("certificate_verdict").get<std::string>();
  r.certificate_verdict = cv == to_string(CertificateVerdict::kCertifiedStable)
                              ? CertificateVerdict::kCertifiedStable
                              : CertificateVerdict::kNotCertified;
  const auto bv = j.at("brute_force_verdict").get<std::string>();
  if (bv == to_string(BruteForceVerdict::kStable)) {
    r.brute_force_verdict = BruteForceVerdict::kStable;
  } else if (bv == to_string(BruteForceVerdict::kMarginal)) {
    r.brute_force_verdict = BruteForceVerdict::kMarginal;
  } else {
    r.brute_force_verdict = BruteForceVerdict::kUnstable;
  }
  for (const auto& q : j.at("quantities"))
    r.quantities.emplace_back(q.at(0).get<std::string>(), number_from_json(q.at(1)));
  r.notes = j.at("notes").get<std::vector<std::string>>();
  return r;
}

}  // namespace lopt::harness
