#include "sepconv/svg.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace sepconv {

namespace {

constexpr const char* kHeader = "setup,mean_abs_diff_pct,std_abs_diff_pct,trials_used,diverged";

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

double field_double(const std::string& v, int lineno) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw std::invalid_argument("summary csv line " + std::to_string(lineno) +
                                ": bad number '" + v + "'");
  return out;
}

int field_int(const std::string& v, int lineno) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("summary csv line " + std::to_string(lineno) +
                                ": bad integer '" + v + "'");
  return out;
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt4g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace

std::vector<SummaryCsvRow> parse_summary_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool saw_header = false;
  std::vector<SummaryCsvRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    if (!saw_header) {
      if (stripped != kHeader)
        throw std::invalid_argument("summary csv line " + std::to_string(lineno) +
                                    ": expected header '" + kHeader + "', got '" + stripped + "'");
      saw_header = true;
      continue;
    }
    const auto fields = split_fields(stripped);
    if (fields.size() != 5)
      throw std::invalid_argument("summary csv line " + std::to_string(lineno) + ": expected 5 fields, got " +
                                  std::to_string(fields.size()));
    SummaryCsvRow row;
    row.setup = trim(fields[0]);
    if (row.setup.empty())
      throw std::invalid_argument("summary csv line " + std::to_string(lineno) + ": empty setup name");
    row.mean_abs_diff_pct = field_double(trim(fields[1]), lineno);
    row.std_abs_diff_pct = field_double(trim(fields[2]), lineno);
    row.trials_used = field_int(trim(fields[3]), lineno);
    row.diverged = field_int(trim(fields[4]), lineno);
    rows.push_back(std::move(row));
  }
  if (!saw_header) throw std::invalid_argument("summary csv: missing header row");
  return rows;
}

std::string render_summary_svg(const std::vector<SummaryCsvRow>& rows) {
  constexpr double kWidth = 640.0, kHeight = 400.0;
  constexpr double kLeft = 70.0, kRight = 620.0, kTop = 50.0, kBottom = 320.0;
  const double plot_w = kRight - kLeft;
  const double plot_h = kBottom - kTop;

  double raw_max = 0.0;
  for (const auto& row : rows) raw_max = std::max(raw_max, row.mean_abs_diff_pct);
  const double y_max = raw_max > 0.0 ? raw_max * 1.1 : 1.0;

  static constexpr const char* kPalette[] = {"#4878a8", "#e49444", "#d1605e", "#85b6b2",
                                             "#6a9f58", "#e7ca60", "#a87c9f", "#967662"};
  constexpr int kPaletteSize = 8;

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
         "viewBox=\"0 0 640 400\" font-family=\"sans-serif\">\n";
  out += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"#ffffff\"/>\n";
  out += "<text x=\"320\" y=\"28\" font-size=\"15\" text-anchor=\"middle\" fill=\"#222222\">"
         "mean absolute test-error difference vs baseline</text>\n";
  out += "<text x=\"18\" y=\"185\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222222\" "
         "transform=\"rotate(-90 18 185)\">mean abs diff (%)</text>\n";

  for (int i = 0; i <= 4; ++i) {
    const double frac = static_cast<double>(i) / 4.0;
    const double y = kBottom - frac * plot_h;
    const double value = frac * y_max;
    out += "<line x1=\"" + fmt2(kLeft) + "\" y1=\"" + fmt2(y) + "\" x2=\"" + fmt2(kRight) +
           "\" y2=\"" + fmt2(y) + "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    out += "<text x=\"" + fmt2(kLeft - 8.0) + "\" y=\"" + fmt2(y + 4.0) +
           "\" font-size=\"11\" text-anchor=\"end\" fill=\"#444444\">" + fmt4g(value) +
           "</text>\n";
  }

  const int n = static_cast<int>(rows.size());
  for (int i = 0; i < n; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    const double slot = plot_w / static_cast<double>(n);
    const double bar_w = slot * 0.6;
    const double x = kLeft + slot * (static_cast<double>(i) + 0.2);
    const double h = row.mean_abs_diff_pct <= 0.0 ? 0.0 : row.mean_abs_diff_pct / y_max * plot_h;
    const double y = kBottom - h;
    const char* color = kPalette[i % kPaletteSize];
    out += "<rect class=\"bar\" x=\"" + fmt2(x) + "\" y=\"" + fmt2(y) + "\" width=\"" +
           fmt2(bar_w) + "\" height=\"" + fmt2(h) + "\" fill=\"" + color + "\"/>\n";
    out += "<text x=\"" + fmt2(x + bar_w / 2.0) + "\" y=\"" + fmt2(y - 5.0) +
           "\" font-size=\"11\" text-anchor=\"middle\" fill=\"#222222\">" +
           fmt4g(row.mean_abs_diff_pct) + "</text>\n";
    out += "<text x=\"" + fmt2(x + bar_w / 2.0) + "\" y=\"" + fmt2(kBottom + 14.0) +
           "\" font-size=\"11\" text-anchor=\"end\" fill=\"#222222\" transform=\"rotate(-28 " +
           fmt2(x + bar_w / 2.0) + " " + fmt2(kBottom + 14.0) + ")\">" + row.setup +
           "</text>\n";
  }

  out += "<line x1=\"" + fmt2(kLeft) + "\" y1=\"" + fmt2(kTop) + "\" x2=\"" + fmt2(kLeft) +
         "\" y2=\"" + fmt2(kBottom) + "\" stroke=\"#222222\" stroke-width=\"1.5\"/>\n";
  out += "<line x1=\"" + fmt2(kLeft) + "\" y1=\"" + fmt2(kBottom) + "\" x2=\"" + fmt2(kRight) +
         "\" y2=\"" + fmt2(kBottom) + "\" stroke=\"#222222\" stroke-width=\"1.5\"/>\n";
  out += "</svg>\n";
  return out;
}

}  // namespace sepconv
