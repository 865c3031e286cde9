#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cdkd/errors.hpp"
#include "cdkd/report.hpp"

using namespace cdkd;
using namespace cdkd::harness;

namespace {

std::string data_error(const std::string& text) {
  try {
    parse_metrics(text, "m.csv");
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

std::string points_of(const std::string& svg, std::size_t which) {
  std::size_t pos = 0;
  for (std::size_t i = 0; i <= which; ++i) pos = svg.find("points=\"", pos) + 8;
  return svg.substr(pos, svg.find('"', pos) - pos);
}

std::string csv_for(std::size_t epochs) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (std::size_t e = 0; e < epochs; ++e) {
    MetricRow t{e, "train", 2.0 - 0.1 * e, 1.0, 0.5, 0.5, 1.0 + 0.2 * e, e / 10.0, 0.5 + 0.04 * e};
    MetricRow v = t;
    v.split = "val";
    v.pck = 0.45 + 0.05 * e;
    s += format_metric_row(t) + "\n" + format_metric_row(v) + "\n";
  }
  return s;
}

}  // namespace

TEST(Metrics, RowsRoundTripThroughText) {
  const MetricRow r{3, "val", 1.0 / 3.0, 0.25, 0.0, 1e-9, 2.5, 0.3, 0.875};
  const auto rows =
      parse_metrics(std::string(kMetricsHeader) + "\r\n" + format_metric_row(r) + "\r\n", "m");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].epoch, 3u);
  EXPECT_EQ(rows[0].split, "val");
  EXPECT_EQ(rows[0].loss_total, 1.0 / 3.0);
  EXPECT_EQ(rows[0].loss_logit, 1e-9);
  EXPECT_EQ(rows[0].pck, 0.875);
}

TEST(Metrics, MalformedInputNamesLine) {
  const std::string h = std::string(kMetricsHeader) + "\n";
  EXPECT_NE(data_error("epoch,split\n").find("m.csv:1"), std::string::npos);
  EXPECT_NE(data_error(h + "0,train,1,1,1,1,1,0,0.5\n0,val,1,1\n").find("m.csv:3"),
            std::string::npos);
  EXPECT_NE(data_error(h + "0,test,1,1,1,1,1,0,0.5\n").find("m.csv:2"), std::string::npos);
  EXPECT_NE(data_error(h + "0,train,1,x,1,1,1,0,0.5\n").find("m.csv:2"), std::string::npos);
  EXPECT_NE(data_error(h + "1.5,train,1,1,1,1,1,0,0.5\n").find("m.csv:2"), std::string::npos);
  EXPECT_FALSE(data_error("").empty());
  EXPECT_THROW(read_metrics("/nonexistent/metrics.csv"), DataError);
}

TEST(Metrics, NonFiniteDiagnosticRowsParse) {
  const auto rows = parse_metrics(
      std::string(kMetricsHeader) + "\n" + "2,train,nan,nan,0,0,1,0.2,0\n", "m");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(std::isnan(rows[0].loss_total));
}

TEST(Svg, OnePolylinePerSeriesAndOnePointPerSample) {
  const std::vector<Series> s{{"a", {0, 1, 2, 3}, {1, 2, 3, 4}}, {"b", {0, 1}, {4, 4}}};
  const auto svg = svg_chart("T", "y", s);
  EXPECT_EQ(count(svg, "<polyline"), 2u);
  EXPECT_EQ(count(points_of(svg, 0), ","), 4u);
  EXPECT_EQ(count(points_of(svg, 1), ","), 2u);
  EXPECT_NE(svg.find("data-label=\"b\""), std::string::npos);
  EXPECT_EQ(svg.rfind("</svg>"), svg.size() - 7);
}

TEST(Report, WritesChartsAndSummary) {
  const auto dir = std::filesystem::temp_directory_path() / "cdkd_test_report";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto csv = csv_for(6);
  std::ofstream(dir / "metrics.csv") << csv;
  const auto written = emit_report(dir);
  EXPECT_EQ(written.size(), 5u);
  for (const char* name : {"losses.svg", "tau.svg", "xi.svg", "pck.svg", "summary.txt"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / name)) << name;
  }
  auto slurp = [&](const char* name) {
    std::ifstream in(dir / name);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const auto pck = slurp("pck.svg");
  EXPECT_EQ(count(pck, "<polyline"), 2u);
  EXPECT_EQ(count(points_of(pck, 0), ","), 6u);
  EXPECT_EQ(count(slurp("losses.svg"), "<polyline"), 8u);
  const auto summary = slurp("summary.txt");
  EXPECT_NE(summary.find("epochs: 6"), std::string::npos) << summary;
  EXPECT_NE(summary.find("(epoch 5)"), std::string::npos) << summary;
  EXPECT_NE(summary.find("xi non-decreasing: yes"), std::string::npos);
  EXPECT_EQ(slurp("metrics.csv"), csv);
}
