#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cdkd/errors.hpp"
#include "cdkd/report.hpp"

namespace cdkd::harness {

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

double number(const std::string& s, const std::string& where) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw DataError(where + ": bad number '" + s + "'");
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

std::vector<MetricRow> parse_metrics(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = source + ":" + std::to_string(lineno);
    if (lineno == 1) {
      if (line != kMetricsHeader) throw DataError(where + ": unexpected header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 9) {
      throw DataError(where + ": expected 9 fields, found " + std::to_string(f.size()));
    }
    MetricRow r;
    const double epoch = number(f[0], where);
    if (epoch < 0 || epoch != std::floor(epoch)) throw DataError(where + ": bad epoch");
    r.epoch = static_cast<std::size_t>(epoch);
    r.split = f[1];
    if (r.split != "train" && r.split != "val") {
      throw DataError(where + ": unknown split '" + r.split + "'");
    }
    double* dst[] = {&r.loss_total, &r.loss_ori, &r.loss_fea, &r.loss_logit,
                     &r.tau,        &r.xi,       &r.pck};
    for (std::size_t i = 0; i < 7; ++i) *dst[i] = number(f[i + 2], where);
    rows.push_back(std::move(r));
  }
  if (lineno == 0) throw DataError(source + ": empty metrics file");
  return rows;
}

std::vector<MetricRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_metrics(ss.str(), path.string());
}

std::string svg_chart(const std::string& title, const std::string& y_label,
                      const std::vector<Series>& series) {
  constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) {
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">" << title
     << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">"
       << fmt(yv) << "</text>\n";
    const double xv = x0 + (x1 - x0) * t / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << kH - kBottom + 18
       << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 10
     << "\" text-anchor=\"middle\">epoch</text>\n";
  os << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << kTop + ph / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    os << "<polyline class=\"series\" data-label=\"" << s.label << "\" fill=\"none\" stroke=\""
       << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      if (j) os << ' ';
      const double y = std::isfinite(s.y[j]) ? s.y[j] : y1;
      os << fixed(px(s.x[j])) << ',' << fixed(py(y));
    }
    os << "\"/>\n";
    const double ly = kTop + 14 + 18.0 * static_cast<double>(i);
    os << "<line x1=\"" << kW - kRight + 12 << "\" y1=\"" << ly - 4 << "\" x2=\""
       << kW - kRight + 32 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kW - kRight + 38 << "\" y=\"" << ly << "\">" << s.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::filesystem::path> emit_report(const std::filesystem::path& run_dir) {
  const auto rows = read_metrics(run_dir / "metrics.csv");
  auto series = [&](const std::string& split, double MetricRow::*field, const std::string& label) {
    Series s{label, {}, {}};
    for (const auto& r : rows) {
      if (r.split != split) continue;
      s.x.push_back(static_cast<double>(r.epoch));
      s.y.push_back(r.*field);
    }
    return s;
  };

  std::vector<std::filesystem::path> written;
  auto write = [&](const std::string& name, const std::string& body) {
    const auto path = run_dir / name;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    os << body;
    written.push_back(path);
  };

  std::vector<Series> losses;
  for (const char* split : {"train", "val"}) {
    const std::string p = split;
    losses.push_back(series(p, &MetricRow::loss_total, p + " total"));
    losses.push_back(series(p, &MetricRow::loss_ori, p + " ori"));
    losses.push_back(series(p, &MetricRow::loss_fea, p + " fea"));
    losses.push_back(series(p, &MetricRow::loss_logit, p + " logit"));
  }
  write("losses.svg", svg_chart("Loss components", "loss", losses));
  write("tau.svg", svg_chart("Temperature", "tau", {series("train", &MetricRow::tau, "tau")}));
  write("xi.svg", svg_chart("Difficulty coefficient", "xi", {series("train", &MetricRow::xi, "xi")}));
  write("pck.svg", svg_chart("PCK", "pck",
                             {series("train", &MetricRow::pck, "train"),
                              series("val", &MetricRow::pck, "val")}));

  std::ostringstream sum;
  const MetricRow* best = nullptr;
  const MetricRow* last_val = nullptr;
  const MetricRow* last_train = nullptr;
  double tau_lo = INFINITY, tau_hi = -INFINITY;
  bool xi_monotone = true;
  double prev_xi = -INFINITY;
  std::size_t epochs = 0;
  for (const auto& r : rows) {
    if (r.split == "val") {
      last_val = &r;
      if (best == nullptr || r.pck > best->pck) best = &r;
    } else {
      last_train = &r;
      ++epochs;
      tau_lo = std::min(tau_lo, r.tau);
      tau_hi = std::max(tau_hi, r.tau);
      if (r.xi < prev_xi) xi_monotone = false;
      prev_xi = r.xi;
    }
  }
  sum << "run: " << run_dir.string() << "\n";
  sum << "epochs: " << epochs << "\n";
  if (best != nullptr) {
    sum << "best val pck: " << format_double(best->pck) << " (epoch " << best->epoch << ")\n";
  }
  if (last_val != nullptr) {
    sum << "final val pck: " << format_double(last_val->pck) << "\n";
    sum << "final val loss: " << format_double(last_val->loss_total) << "\n";
  }
  if (last_train != nullptr) {
    sum << "final train loss: total " << format_double(last_train->loss_total) << ", ori "
        << format_double(last_train->loss_ori) << ", fea " << format_double(last_train->loss_fea)
        << ", logit " << format_double(last_train->loss_logit) << "\n";
    sum << "tau range: [" << format_double(tau_lo) << ", " << format_double(tau_hi) << "]\n";
    sum << "xi non-decreasing: " << (xi_monotone ? "yes" : "no") << "\n";
  }
  write("summary.txt", sum.str());
  return written;
}

}  // namespace cdkd::harness
