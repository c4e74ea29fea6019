#include "kronfeat/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace kf {

namespace {

constexpr int kWidth = 720;
constexpr int kHeight = 480;
constexpr int kLeft = 70, kRight = 20, kTop = 40, kBottom = 55;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Axis {
  double lo = 0.0, hi = 1.0;
  bool log = false;

  double place(double v, double pix_lo, double pix_hi) const {
    double t = log ? (std::log10(v) - lo) / (hi - lo) : (v - lo) / (hi - lo);
    return pix_lo + t * (pix_hi - pix_lo);
  }
};

Axis fit_axis(const std::vector<const std::vector<double>*>& cols, bool log) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto* col : cols)
    for (double v : *col) {
      if (!std::isfinite(v) || (log && v <= 0.0)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(lo <= hi)) {
    lo = log ? 0.1 : 0.0;
    hi = 1.0;
  }
  Axis ax;
  ax.log = log;
  if (log) {
    ax.lo = std::floor(std::log10(lo));
    ax.hi = std::ceil(std::log10(hi));
    if (ax.hi - ax.lo < 1.0) ax.hi = ax.lo + 1.0;
  } else {
    if (lo == hi) {
      lo -= 0.5;
      hi += 0.5;
    }
    double pad = 0.05 * (hi - lo);
    ax.lo = lo - pad;
    ax.hi = hi + pad;
  }
  return ax;
}

std::vector<double> axis_ticks(const Axis& ax) {
  std::vector<double> ticks;
  if (ax.log) {
    int step = std::max(1, static_cast<int>((ax.hi - ax.lo) / 8.0 + 0.999));
    for (double e = ax.lo; e <= ax.hi + 1e-9; e += step)
      ticks.push_back(std::pow(10.0, e));
    return ticks;
  }
  double span = ax.hi - ax.lo;
  double raw = span / 6.0;
  double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double norm = raw / mag;
  double step = (norm < 1.5 ? 1.0 : norm < 3.5 ? 2.0 : norm < 7.5 ? 5.0 : 10.0) * mag;
  double first = std::ceil(ax.lo / step) * step;
  for (double v = first; v <= ax.hi + 1e-9 * span; v += step) ticks.push_back(v);
  return ticks;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_svg_plot(const std::string& path, const PlotSpec& spec,
                    const std::vector<PlotSeries>& series) {
  std::vector<const std::vector<double>*> xcols, ycols;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size())
      throw std::invalid_argument("plot series length mismatch: " + s.label);
    xcols.push_back(&s.x);
    ycols.push_back(&s.y);
  }
  Axis xa = fit_axis(xcols, spec.log_x);
  Axis ya = fit_axis(ycols, spec.log_y);
  const double px0 = kLeft, px1 = kWidth - kRight;
  const double py0 = kHeight - kBottom, py1 = kTop;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
      << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << " "
      << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"15\">"
      << escape_xml(spec.title) << "</text>\n";

  for (double t : axis_ticks(xa)) {
    double x = xa.place(t, px0, px1);
    if (x < px0 - 0.5 || x > px1 + 0.5) continue;
    out << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(py0) << "\" x2=\""
        << fmt(x) << "\" y2=\"" << fmt(py1)
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(py0 + 18)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << fmt(t) << "</text>\n";
  }
  for (double t : axis_ticks(ya)) {
    double y = ya.place(t, py0, py1);
    if (y > py0 + 0.5 || y < py1 - 0.5) continue;
    out << "<line x1=\"" << fmt(px0) << "\" y1=\"" << fmt(y) << "\" x2=\""
        << fmt(px1) << "\" y2=\"" << fmt(y)
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        << "<text x=\"" << fmt(px0 - 6) << "\" y=\"" << fmt(y + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << fmt(t) << "</text>\n";
  }
  out << "<rect x=\"" << px0 << "\" y=\"" << py1 << "\" width=\""
      << px1 - px0 << "\" height=\"" << py0 - py1
      << "\" fill=\"none\" stroke=\"black\"/>\n"
      << "<text x=\"" << (px0 + px1) / 2 << "\" y=\"" << kHeight - 14
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\">"
      << escape_xml(spec.xlabel) << "</text>\n"
      << "<text x=\"18\" y=\"" << (py0 + py1) / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\" transform=\"rotate(-90 18 "
      << (py0 + py1) / 2 << ")\">" << escape_xml(spec.ylabel) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % (sizeof kPalette / sizeof *kPalette)];
    std::string points;
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      double vx = s.x[j], vy = s.y[j];
      if (!std::isfinite(vx) || !std::isfinite(vy)) continue;
      if ((xa.log && vx <= 0.0) || (ya.log && vy <= 0.0)) continue;
      points += fmt(xa.place(vx, px0, px1)) + "," +
                fmt(ya.place(vy, py0, py1)) + " ";
    }
    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.8\" points=\"" << points << "\"/>\n";
    double ly = py1 + 14 + 16.0 * static_cast<double>(i);
    out << "<line x1=\"" << px1 - 150 << "\" y1=\"" << fmt(ly - 4)
        << "\" x2=\"" << px1 - 126 << "\" y2=\"" << fmt(ly - 4)
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << px1 - 120 << "\" y=\"" << fmt(ly)
        << "\" font-family=\"sans-serif\" font-size=\"12\">"
        << escape_xml(s.label) << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace kf
