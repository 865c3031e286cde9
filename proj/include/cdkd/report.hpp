#pragma once

// Run report: summary text plus static SVG curves read back from metrics.csv.

#include <filesystem>
#include <string>
#include <vector>

#include "cdkd/trainer.hpp"

namespace cdkd::harness {

/// Parses metrics.csv text; malformed rows throw DataError naming the line.
std::vector<MetricRow> parse_metrics(const std::string& text, const std::string& source);
std::vector<MetricRow> read_metrics(const std::filesystem::path& path);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Polyline chart; one <polyline> per series with one point per sample.
std::string svg_chart(const std::string& title, const std::string& y_label,
                      const std::vector<Series>& series);

/// Writes summary.txt, losses.svg, tau.svg, xi.svg and pck.svg into run_dir.
/// Returns the written paths. metrics.csv is only read.
std::vector<std::filesystem::path> emit_report(const std::filesystem::path& run_dir);

}  // namespace cdkd::harness
