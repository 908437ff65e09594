#pragma once

// Stacked-area SVG of a hypnodensity. Bands from the bottom: W (white),
// N1 (red), N2 (light blue), N3 (dark blue), REM (black). x axis in hours.

#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>

#include "hypnodx/hypnodensity.hpp"

namespace hypnodx::plot {

inline constexpr std::array<const char*, kNumStages> kStageColors = {"#ffffff", "#e41a1c", "#9ecae1", "#08306b",
                                                                     "#000000"};

struct PlotStyle {
  double width = 900.0;
  double height = 240.0;
  double margin_left = 50.0;
  double margin_right = 80.0;
  double margin_top = 15.0;
  double margin_bottom = 40.0;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", std::abs(v) < 0.005 ? 0.0 : v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Each segment is drawn as a flat step over [t, t + resolution).
inline std::string hypnodensity_svg(const Hypnodensity& hd, const PlotStyle& st = {}) {
  using detail::num;
  const double pw = st.width - st.margin_left - st.margin_right;
  const double ph = st.height - st.margin_top - st.margin_bottom;
  const double total_s = std::max(hd.duration_s(), hd.resolution_s);
  const double x0 = st.margin_left;
  const double y0 = st.margin_top + ph;  // baseline
  auto X = [&](double t_s) { return x0 + pw * t_s / total_s; };
  auto Y = [&](double frac) { return y0 - ph * frac; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << num(st.width) << "\" height=\""
    << num(st.height) << "\" viewBox=\"0 0 " << num(st.width) << ' ' << num(st.height) << "\">\n"
    << "<title>" << (hd.recording_id.empty() ? std::string("hypnodensity") : detail::xml_escape(hd.recording_id)) << "</title>\n"
    << "<rect x=\"0\" y=\"0\" width=\"" << num(st.width) << "\" height=\"" << num(st.height)
    << "\" fill=\"#f2f2f2\"/>\n";

  std::vector<StageProbs> cum(hd.size());
  for (std::size_t t = 0; t < hd.size(); ++t) {
    double acc = 0.0;
    for (std::size_t k = 0; k < kNumStages; ++k) cum[t][k] = (acc += hd.probs[t][k]);
  }
  for (std::size_t k = 0; k < kNumStages; ++k) {
    o << "<path class=\"stage-" << kStageNames[k] << "\" fill=\"" << kStageColors[k] << "\" d=\"";
    // upper edge left to right
    for (std::size_t t = 0; t < hd.size(); ++t) {
      const double a = static_cast<double>(t) * hd.resolution_s;
      const double y = Y(cum[t][k]);
      o << (t == 0 ? "M" : " L") << num(X(a)) << ',' << num(y) << " L" << num(X(a + hd.resolution_s)) << ','
        << num(y);
    }
    // lower edge right to left
    for (std::size_t t = hd.size(); t-- > 0;) {
      const double a = static_cast<double>(t) * hd.resolution_s;
      const double y = Y(k == 0 ? 0.0 : cum[t][k - 1]);
      o << " L" << num(X(a + hd.resolution_s)) << ',' << num(y) << " L" << num(X(a)) << ',' << num(y);
    }
    o << " Z\"/>\n";
  }

  // frame and axes
  o << "<rect x=\"" << num(x0) << "\" y=\"" << num(st.margin_top) << "\" width=\"" << num(pw) << "\" height=\""
    << num(ph) << "\" fill=\"none\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
  const double hours = total_s / 3600.0;
  double step = 1.0;
  if (hours <= 1.0) step = 0.25;
  else if (hours <= 3.0) step = 0.5;
  for (int i = 0; static_cast<double>(i) * step <= hours + 1e-9; ++i) {
    const double h = static_cast<double>(i) * step;
    const double x = X(h * 3600.0);
    char label[32];
    std::snprintf(label, sizeof label, step < 1.0 ? "%.2f" : "%.0f", h);
    o << "<line x1=\"" << num(x) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x) << "\" y2=\"" << num(y0 + 5)
      << "\" stroke=\"#000000\"/>\n"
      << "<text x=\"" << num(x) << "\" y=\"" << num(y0 + 18) << "\" font-size=\"11\" text-anchor=\"middle\">"
      << label << "</text>\n";
  }
  o << "<text x=\"" << num(x0 + pw / 2) << "\" y=\"" << num(st.height - 6) << "\" font-size=\"12\" "
    << "text-anchor=\"middle\">Time (hours)</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    o << "<text x=\"" << num(x0 - 6) << "\" y=\"" << num(Y(f) + 4) << "\" font-size=\"11\" text-anchor=\"end\">"
      << num(f) << "</text>\n";
  }
  // legend
  for (std::size_t k = 0; k < kNumStages; ++k) {
    const double ly = st.margin_top + 18.0 * static_cast<double>(kNumStages - 1 - k);
    const double lx = x0 + pw + 12;
    o << "<rect x=\"" << num(lx) << "\" y=\"" << num(ly) << "\" width=\"12\" height=\"12\" fill=\""
      << kStageColors[k] << "\" stroke=\"#000000\" stroke-width=\"0.5\"/>\n"
      << "<text x=\"" << num(lx + 18) << "\" y=\"" << num(ly + 10) << "\" font-size=\"11\">" << kStageNames[k]
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace hypnodx::plot
