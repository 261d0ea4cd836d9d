#pragma once

// Seed aggregation and small self-contained SVG charts.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "spurcl/error.hpp"

namespace spurcl::report {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw DataError("mean_std: no values");
  MeanStd r;
  r.n = v.size();
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional half-width of the band
};

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double left = 60, right = 200, top = 40, bottom = 50, width = 720, height = 420;
  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

inline std::string axes(const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel,
                        bool x_ticks = true) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(Frame::width) + "\" height=\"" +
                  num(Frame::height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(Frame::width / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
       "</text>\n";
  const double xa = f.px(f.x0), xb = f.px(f.x1), ya = f.py(f.y0), yb = f.py(f.y1);
  s += "<line x1=\"" + num(xa) + "\" y1=\"" + num(ya) + "\" x2=\"" + num(xb) + "\" y2=\"" + num(ya) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(xa) + "\" y1=\"" + num(ya) + "\" x2=\"" + num(xa) + "\" y2=\"" + num(yb) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double yv = f.y0 + (f.y1 - f.y0) * i / 5.0;
    s += "<text x=\"" + num(xa - 6) + "\" y=\"" + num(f.py(yv) + 4) + "\" text-anchor=\"end\">" + num(yv) + "</text>\n";
    if (x_ticks) {
      const double xv = f.x0 + (f.x1 - f.x0) * i / 5.0;
      s += "<text x=\"" + num(f.px(xv)) + "\" y=\"" + num(ya + 16) + "\" text-anchor=\"middle\">" + num(xv) +
           "</text>\n";
    }
  }
  s += "<text x=\"" + num((xa + xb) / 2) + "\" y=\"" + num(Frame::height - 12) + "\" text-anchor=\"middle\">" +
       escape(xlabel) + "</text>\n";
  s += "<text x=\"16\" y=\"" + num((ya + yb) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       num((ya + yb) / 2) + ")\">" + escape(ylabel) + "</text>\n";
  return s;
}

inline std::string legend(const std::vector<std::string>& labels) {
  std::string s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = Frame::top + 16.0 * static_cast<double>(i);
    const double x = Frame::width - Frame::right + 12;
    s += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"10\" height=\"10\" fill=\"" + palette(i) + "\"/>\n";
    s += "<text x=\"" + num(x + 14) + "\" y=\"" + num(y + 9) + "\">" + escape(labels[i]) + "</text>\n";
  }
  return s;
}

}  // namespace detail

/// Line chart with optional error bands. The y range is [0, 1] unless data
/// falls outside it.
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                  const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = 0.0, y1 = 1.0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DataError("svg_line_chart: x and y lengths differ");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - e);
      y1 = std::max(y1, s.y[i] + e);
    }
  }
  if (!(x1 > x0)) {
    x0 = std::isfinite(x0) ? x0 - 1 : 0;
    x1 = x0 + 2;
  }
  const detail::Frame f{x0, x1, y0, y1};
  std::string svg = detail::axes(f, title, xlabel, ylabel);
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    labels.push_back(s.label);
    const char* color = detail::palette(k);
    if (!s.err.empty() && s.err.size() == s.y.size()) {
      std::string band;
      for (std::size_t i = 0; i < s.x.size(); ++i) band += detail::num(f.px(s.x[i])) + "," + detail::num(f.py(s.y[i] + s.err[i])) + " ";
      for (std::size_t i = s.x.size(); i-- > 0;) band += detail::num(f.px(s.x[i])) + "," + detail::num(f.py(s.y[i] - s.err[i])) + " ";
      svg += "<polygon points=\"" + band + "\" fill=\"" + color + "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
    }
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts += detail::num(f.px(s.x[i])) + "," + detail::num(f.py(s.y[i])) + " ";
    svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      svg += "<circle cx=\"" + detail::num(f.px(s.x[i])) + "\" cy=\"" + detail::num(f.py(s.y[i])) + "\" r=\"3\" fill=\"" +
             color + "\"/>\n";
  }
  svg += detail::legend(labels);
  svg += "</svg>\n";
  return svg;
}

/// Grouped bar chart: values[group][series] with matching errors.
inline std::string svg_bar_chart(const std::string& title, const std::string& ylabel,
                                 const std::vector<std::string>& groups, const std::vector<std::string>& series,
                                 const std::vector<std::vector<double>>& values,
                                 const std::vector<std::vector<double>>& errors = {}) {
  if (values.size() != groups.size()) throw DataError("svg_bar_chart: one value row per group");
  double y1 = 1.0;
  for (std::size_t g = 0; g < values.size(); ++g) {
    if (values[g].size() != series.size()) throw DataError("svg_bar_chart: one value per series");
    for (std::size_t k = 0; k < values[g].size(); ++k) {
      const double e = g < errors.size() && k < errors[g].size() ? errors[g][k] : 0.0;
      y1 = std::max(y1, values[g][k] + e);
    }
  }
  const detail::Frame f{0.0, static_cast<double>(groups.size()), 0.0, y1};
  std::string svg = detail::axes(f, title, "", ylabel, false);
  const double slot = f.px(1.0) - f.px(0.0);
  const double bar = slot * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = f.px(static_cast<double>(g)) + slot * 0.1;
    svg += "<text x=\"" + detail::num(f.px(g + 0.5)) + "\" y=\"" + detail::num(f.py(0) + 16) +
           "\" text-anchor=\"middle\">" + detail::escape(groups[g]) + "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double v = values[g][k];
      const double x = gx + bar * static_cast<double>(k);
      const double top = f.py(std::max(v, 0.0)), base = f.py(0.0);
      svg += "<rect x=\"" + detail::num(x) + "\" y=\"" + detail::num(top) + "\" width=\"" + detail::num(bar * 0.95) +
             "\" height=\"" + detail::num(base - top) + "\" fill=\"" + detail::palette(k) + "\"/>\n";
      const double e = g < errors.size() && k < errors[g].size() ? errors[g][k] : 0.0;
      if (e > 0) {
        const double cx = x + bar * 0.475;
        svg += "<line x1=\"" + detail::num(cx) + "\" y1=\"" + detail::num(f.py(v - e)) + "\" x2=\"" + detail::num(cx) +
               "\" y2=\"" + detail::num(f.py(v + e)) + "\" stroke=\"black\"/>\n";
      }
    }
  }
  svg += detail::legend(series);
  svg += "</svg>\n";
  return svg;
}

}  // namespace spurcl::report
