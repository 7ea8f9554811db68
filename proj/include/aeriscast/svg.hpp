// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace aeriscast::svg {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<std::optional<double>> y;
};

struct Panel {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    bool log_y = false;
    std::optional<double> reference_y; // dashed horizontal line
    std::vector<Series> series;
};

inline Series make_series(std::string label, std::vector<double> x, const std::vector<double> &y) {
    Series s{std::move(label), std::move(x), {}};
    for (double v : y) s.y.emplace_back(v);
    return s;
}

namespace detail {

inline const char *color(std::size_t i) {
    static const char *palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};
    return palette[i % 8];
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string escape(const std::string &s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else o += c;
    }
    return o;
}

inline void draw_panel(std::ostringstream &o, const Panel &p, double ox, double oy, double w, double h) {
    const double l = ox + 60, r = ox + w - 15, t = oy + 30, b = oy + h - 45;
    auto tx = [&](double v) { return p.log_x ? std::log10(v) : v; };
    auto ty = [&](double v) { return p.log_y ? std::log10(v) : v; };
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto &s : p.series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!s.y[i] || (p.log_x && s.x[i] <= 0) || (p.log_y && *s.y[i] <= 0)) continue;
            x0 = std::min(x0, tx(s.x[i]));
            x1 = std::max(x1, tx(s.x[i]));
            y0 = std::min(y0, ty(*s.y[i]));
            y1 = std::max(y1, ty(*s.y[i]));
        }
    if (p.reference_y) {
        y0 = std::min(y0, ty(*p.reference_y));
        y1 = std::max(y1, ty(*p.reference_y));
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double v) { return l + (tx(v) - x0) / (x1 - x0) * (r - l); };
    auto py = [&](double v) { return b - (ty(v) - y0) / (y1 - y0) * (b - t); };

    o << "<rect x='" << l << "' y='" << t << "' width='" << r - l << "' height='" << b - t
      << "' fill='none' stroke='#444'/>\n";
    o << "<text x='" << (l + r) / 2 << "' y='" << oy + 18 << "' text-anchor='middle' font-size='13'>"
      << escape(p.title) << "</text>\n";
    o << "<text x='" << (l + r) / 2 << "' y='" << b + 34 << "' text-anchor='middle' font-size='11'>"
      << escape(p.x_label) << "</text>\n";
    o << "<text transform='translate(" << ox + 14 << "," << (t + b) / 2
      << ") rotate(-90)' text-anchor='middle' font-size='11'>" << escape(p.y_label) << "</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double fx = x0 + k * (x1 - x0) / 4, fy = y0 + k * (y1 - y0) / 4;
        const double vx = p.log_x ? std::pow(10.0, fx) : fx, vy = p.log_y ? std::pow(10.0, fy) : fy;
        o << "<text x='" << l + k * (r - l) / 4 << "' y='" << b + 14 << "' text-anchor='middle' font-size='9'>"
          << num(vx) << "</text>\n";
        o << "<text x='" << l - 4 << "' y='" << b - k * (b - t) / 4 + 3 << "' text-anchor='end' font-size='9'>"
          << num(vy) << "</text>\n";
    }
    if (p.reference_y)
        o << "<line x1='" << l << "' x2='" << r << "' y1='" << py(*p.reference_y) << "' y2='" << py(*p.reference_y)
          << "' stroke='#888' stroke-dasharray='4,3'/>\n";
    for (std::size_t si = 0; si < p.series.size(); ++si) {
        const auto &s = p.series[si];
        std::string path;
        bool pen = false;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!s.y[i] || (p.log_x && s.x[i] <= 0) || (p.log_y && *s.y[i] <= 0)) {
                pen = false;
                continue;
            }
            path += (pen ? " L" : " M") + num(px(s.x[i])) + "," + num(py(*s.y[i]));
            pen = true;
        }
        o << "<path d='" << path << "' fill='none' stroke='" << color(si) << "' stroke-width='1.5'/>\n";
        o << "<text x='" << r - 4 << "' y='" << t + 12 + 12 * si << "' text-anchor='end' font-size='10' fill='"
          << color(si) << "'>" << escape(s.label) << "</text>\n";
    }
}

} // namespace detail

/// Grid of line-plot panels, row-major, as a standalone SVG document.
inline std::string render(const std::vector<Panel> &panels, int cols, double panel_w = 360, double panel_h = 260) {
    cols = std::max(1, cols);
    const int rows = static_cast<int>((panels.size() + cols - 1) / cols);
    std::ostringstream o;
    o << "<svg xmlns='http://www.w3.org/2000/svg' width='" << cols * panel_w << "' height='" << rows * panel_h
      << "' font-family='sans-serif'>\n<rect width='100%' height='100%' fill='white'/>\n";
    for (std::size_t i = 0; i < panels.size(); ++i)
        detail::draw_panel(o, panels[i], (i % cols) * panel_w, (i / cols) * panel_h, panel_w, panel_h);
    o << "</svg>\n";
    return o.str();
}

} // namespace aeriscast::svg
