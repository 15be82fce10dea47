#include "peftlab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "peftlab/errors.hpp"

namespace peftlab {

namespace {

constexpr double kWidth = 640.0, kHeight = 440.0;
constexpr double kLeft = 70.0, kRight = 610.0, kTop = 50.0, kBottom = 390.0;

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                         "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<double> nice_ticks(double lo, double hi, std::size_t target = 5) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / static_cast<double>(target);
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (mag * m >= raw) {
      step = mag * m;
      break;
    }
  }
  std::vector<double> ticks;
  for (double t = std::ceil(lo / step) * step; t <= hi + step * 1e-9; t += step) {
    ticks.push_back(t);
  }
  return ticks;
}

}  // namespace

SvgPlot::SvgPlot(std::string title, std::string x_label, std::string y_label)
    : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)) {}

void SvgPlot::add_series(std::string name, std::vector<std::pair<double, double>> points,
                         bool connect) {
  series_.push_back({std::move(name), std::move(points), connect});
}

std::string SvgPlot::render() const {
  double x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;
  bool first = true;
  for (const Series& s : series_) {
    for (const auto& [x, y] : s.points) {
      const double xv = log_x_ ? std::log10(x) : x;
      if (first) {
        x_lo = x_hi = xv;
        y_lo = y_hi = y;
        first = false;
      } else {
        x_lo = std::min(x_lo, xv);
        x_hi = std::max(x_hi, xv);
        y_lo = std::min(y_lo, y);
        y_hi = std::max(y_hi, y);
      }
    }
  }
  if (first) throw ReportError("plot: no points to draw");
  if (x_hi == x_lo) {
    x_lo -= 0.5;
    x_hi += 0.5;
  }
  if (y_hi == y_lo) {
    y_lo -= 0.5;
    y_hi += 0.5;
  }
  const double x_pad = 0.05 * (x_hi - x_lo);
  const double y_pad = 0.08 * (y_hi - y_lo);
  x_lo -= x_pad;
  x_hi += x_pad;
  y_lo -= y_pad;
  y_hi += y_pad;

  auto px = [&](double x) {
    const double xv = log_x_ ? std::log10(x) : x;
    return kLeft + (xv - x_lo) / (x_hi - x_lo) * (kRight - kLeft);
  };
  auto py = [&](double y) { return kBottom - (y - y_lo) / (y_hi - y_lo) * (kBottom - kTop); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\""
      << num(kHeight) << "\" viewBox=\"0 0 " << num(kWidth) << " " << num(kHeight) << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << num(kWidth / 2) << "\" y=\"28\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"16\">" << escape(title_) << "</text>\n";

  // axes
  svg << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kBottom) << "\" x2=\"" << num(kRight)
      << "\" y2=\"" << num(kBottom) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(kLeft)
      << "\" y2=\"" << num(kBottom) << "\" stroke=\"black\"/>\n";

  for (double t : nice_ticks(x_lo, x_hi)) {
    const double x = kLeft + (t - x_lo) / (x_hi - x_lo) * (kRight - kLeft);
    svg << "<line x1=\"" << num(x) << "\" y1=\"" << num(kBottom) << "\" x2=\"" << num(x)
        << "\" y2=\"" << num(kBottom + 5) << "\" stroke=\"black\"/>\n";
    const double label = log_x_ ? std::pow(10.0, t) : t;
    svg << "<text x=\"" << num(x) << "\" y=\"" << num(kBottom + 20)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << num(label)
        << "</text>\n";
  }
  for (double t : nice_ticks(y_lo, y_hi)) {
    const double y = kBottom - (t - y_lo) / (y_hi - y_lo) * (kBottom - kTop);
    svg << "<line x1=\"" << num(kLeft - 5) << "\" y1=\"" << num(y) << "\" x2=\"" << num(kLeft)
        << "\" y2=\"" << num(y) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << num(kLeft - 8) << "\" y=\"" << num(y + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(t)
        << "</text>\n";
  }
  svg << "<text x=\"" << num((kLeft + kRight) / 2) << "\" y=\"" << num(kHeight - 14)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
      << escape(x_label_) << "</text>\n";
  svg << "<text x=\"18\" y=\"" << num((kTop + kBottom) / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
      << "transform=\"rotate(-90 18 " << num((kTop + kBottom) / 2) << ")\">" << escape(y_label_)
      << "</text>\n";

  for (std::size_t i = 0; i < series_.size(); ++i) {
    const Series& s = series_[i];
    const char* color = kColors[i % (sizeof(kColors) / sizeof(kColors[0]))];
    if (s.connect && s.points.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& [x, y] : s.points) svg << num(px(x)) << "," << num(py(y)) << " ";
      svg << "\"/>\n";
    }
    for (const auto& [x, y] : s.points) {
      svg << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y))
          << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    }
    svg << "<text x=\"" << num(kRight - 4) << "\" y=\"" << num(kTop + 16.0 * (i + 1))
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color
        << "\">" << escape(s.name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void SvgPlot::write(const std::string& path) const {
  const std::string body = render();  // may throw before the file is touched
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ReportError("plot: cannot open " + path);
  out << body;
}

}  // namespace peftlab
