#pragma once
// Report rendering: parses a protocol summary CSV and draws a bar chart of
// the per-setup mean absolute test-error differences as a standalone SVG.
// Output is a pure function of the parsed rows, byte for byte.

#include <string>
#include <vector>

namespace sepconv {

struct SummaryCsvRow {
  std::string setup;
  double mean_abs_diff_pct = 0.0;
  double std_abs_diff_pct = 0.0;
  int trials_used = 0;
  int diverged = 0;
};

// Skips `#` comment lines, requires the exact summary schema header, then
// parses one row per line. Throws std::invalid_argument on a malformed
// header, field count, or field value. A header with no rows is valid.
std::vector<SummaryCsvRow> parse_summary_csv(const std::string& text);

// Fixed 640x400 canvas with axes and one bar per row; heights share one
// linear scale, so they are proportional to the mean values. With no rows
// the chart is just the axes.
std::string render_summary_svg(const std::vector<SummaryCsvRow>& rows);

}  // namespace sepconv
