// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal static SVG charts for sweep curves and bucket bars.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace laysum::svg {

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

namespace detail {

inline constexpr std::array<const char*, 6> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
inline constexpr double kWidth = 640, kHeight = 400, kLeft = 60, kRight = 150, kTop = 40, kBottom = 50;

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out.push_back(c);
        }
    }
    return out;
}

inline std::string frame(const std::string& title, const std::string& x_label, const std::string& y_label, double y_min,
                         double y_max) {
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) +
                    "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + num(kWidth / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) + "</text>\n";
    const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
    s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x1) + "\" y2=\"" + num(y0) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x0) + "\" y2=\"" + num(y1) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num((x0 + x1) / 2) + "\" y=\"" + num(kHeight - 12) + "\" text-anchor=\"middle\">" + escape(x_label) + "</text>\n";
    s += "<text x=\"15\" y=\"" + num((y0 + y1) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 15 " + num((y0 + y1) / 2) +
         ")\">" + escape(y_label) + "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        double v = y_min + (y_max - y_min) * t / 4.0;
        double y = y0 - (y0 - y1) * t / 4.0;
        s += "<text x=\"" + num(x0 - 6) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\">" + num(v) + "</text>\n";
    }
    return s;
}

inline std::pair<double, double> y_range(double lo, double hi) {
    if (!std::isfinite(lo) || !std::isfinite(hi)) return {0.0, 1.0};
    if (hi - lo < 1e-9) return {lo - 0.5, hi + 0.5};
    double pad = (hi - lo) * 0.05;
    return {lo - pad, hi + pad};
}

inline std::string legend(const std::vector<std::string>& names) {
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) {
        double y = kTop + 10 + 18.0 * static_cast<double>(i);
        s += "<rect x=\"" + num(kWidth - kRight + 15) + "\" y=\"" + num(y - 9) + "\" width=\"10\" height=\"10\" fill=\"" +
             kPalette[i % kPalette.size()] + "\"/>\n";
        s += "<text x=\"" + num(kWidth - kRight + 30) + "\" y=\"" + num(y) + "\">" + escape(names[i]) + "</text>\n";
    }
    return s;
}

} // namespace detail

inline std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<Series>& series) {
    using namespace detail;
    double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            xlo = std::min(xlo, x);
            xhi = std::max(xhi, x);
            ylo = std::min(ylo, y);
            yhi = std::max(yhi, y);
        }
    }
    auto [y_min, y_max] = y_range(ylo, yhi);
    if (!std::isfinite(xlo)) {
        xlo = 0;
        xhi = 1;
    }
    if (xhi - xlo < 1e-9) xhi = xlo + 1;
    const double x0 = kLeft, x1 = kWidth - kRight, py0 = kHeight - kBottom, py1 = kTop;
    auto px = [&](double x) { return x0 + (x - xlo) / (xhi - xlo) * (x1 - x0); };
    auto py = [&](double y) { return py0 - (y - y_min) / (y_max - y_min) * (py0 - py1); };

    std::string s = frame(title, x_label, y_label, y_min, y_max);
    std::vector<double> ticks;
    for (const auto& sr : series)
        for (auto [x, _] : sr.points) ticks.push_back(x);
    std::sort(ticks.begin(), ticks.end());
    ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
    for (double t : ticks) {
        s += "<text x=\"" + num(px(t)) + "\" y=\"" + num(py0 + 16) + "\" text-anchor=\"middle\">" + num(t) + "</text>\n";
    }
    std::vector<std::string> names;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kPalette[i % kPalette.size()];
        names.push_back(series[i].name);
        std::string pts;
        for (auto [x, y] : series[i].points) pts += num(px(x)) + "," + num(py(y)) + " ";
        s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        for (auto [x, y] : series[i].points) {
            s += "<circle cx=\"" + num(px(x)) + "\" cy=\"" + num(py(y)) + "\" r=\"3\" fill=\"" + color + "\"/>\n";
        }
    }
    s += legend(names);
    s += "</svg>\n";
    return s;
}

/// Grouped bars: one group per category, one bar per series (values may be missing).
inline std::string bar_chart(const std::string& title, const std::string& y_label, const std::vector<std::string>& categories,
                             const std::vector<std::pair<std::string, std::vector<std::optional<double>>>>& series) {
    using namespace detail;
    double hi = 0.0;
    for (const auto& [_, vals] : series)
        for (const auto& v : vals)
            if (v) hi = std::max(hi, *v);
    double y_max = hi > 0 ? hi * 1.1 : 1.0;
    const double x0 = kLeft, x1 = kWidth - kRight, py0 = kHeight - kBottom, py1 = kTop;
    std::string s = frame(title, "", y_label, 0.0, y_max);
    const double group_w = (x1 - x0) / std::max<std::size_t>(1, categories.size());
    const double bar_w = group_w * 0.8 / std::max<std::size_t>(1, series.size());
    std::vector<std::string> names;
    for (std::size_t c = 0; c < categories.size(); ++c) {
        double gx = x0 + group_w * static_cast<double>(c) + group_w * 0.1;
        s += "<text x=\"" + num(x0 + group_w * (static_cast<double>(c) + 0.5)) + "\" y=\"" + num(py0 + 16) +
             "\" text-anchor=\"middle\">" + escape(categories[c]) + "</text>\n";
        for (std::size_t i = 0; i < series.size(); ++i) {
            const auto& vals = series[i].second;
            if (c >= vals.size() || !vals[c]) continue;
            double h = *vals[c] / y_max * (py0 - py1);
            s += "<rect x=\"" + num(gx + bar_w * static_cast<double>(i)) + "\" y=\"" + num(py0 - h) + "\" width=\"" +
                 num(bar_w) + "\" height=\"" + num(h) + "\" fill=\"" + kPalette[i % kPalette.size()] + "\"/>\n";
        }
    }
    for (const auto& [name, _] : series) names.push_back(name);
    s += legend(names);
    s += "</svg>\n";
    return s;
}

} // namespace laysum::svg
