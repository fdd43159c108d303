// Minimal SVG line charts for the report curves. No dependencies; output
// is a standalone .svg with axes, ticks and one polyline per series.
#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "sigmatch/core.hpp"

namespace sigmatch {

struct PlotSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

inline void write_line_chart_svg(std::ostream& out, const std::string& title,
                                 const std::string& x_label, const std::string& y_label,
                                 const std::vector<PlotSeries>& series, int width = 640,
                                 int height = 480) {
    double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    bool any = false;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (!any) {
                x_min = x_max = x;
                y_min = y_max = y;
                any = true;
            } else {
                x_min = std::min(x_min, x);
                x_max = std::max(x_max, x);
                y_min = std::min(y_min, y);
                y_max = std::max(y_max, y);
            }
        }
    if (x_max - x_min < 1e-12) x_max = x_min + 1.0;
    if (y_max - y_min < 1e-12) y_max = y_min + 1.0;

    const double ml = 70, mr = 20, mt = 40, mb = 50;
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto px = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * pw; };
    auto py = [&](double y) { return mt + ph - (y - y_min) / (y_max - y_min) * ph; };

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";

    // axes
    out << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
        << mt + ph << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
        << "\" stroke=\"black\"/>\n";

    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
        const double fx = x_min + (x_max - x_min) * i / ticks;
        const double fy = y_min + (y_max - y_min) * i / ticks;
        char xbuf[32], ybuf[32];
        std::snprintf(xbuf, sizeof(xbuf), "%.3g", fx);
        std::snprintf(ybuf, sizeof(ybuf), "%.3g", fy);
        out << "<line x1=\"" << px(fx) << "\" y1=\"" << mt + ph << "\" x2=\"" << px(fx)
            << "\" y2=\"" << mt + ph + 5 << "\" stroke=\"black\"/>\n";
        out << "<text x=\"" << px(fx) << "\" y=\"" << mt + ph + 20
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << xbuf
            << "</text>\n";
        out << "<line x1=\"" << ml - 5 << "\" y1=\"" << py(fy) << "\" x2=\"" << ml << "\" y2=\""
            << py(fy) << "\" stroke=\"black\"/>\n";
        out << "<text x=\"" << ml - 8 << "\" y=\"" << py(fy) + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << ybuf
            << "</text>\n";
    }
    out << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 10
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << x_label
        << "</text>\n";
    out << "<text x=\"16\" y=\"" << mt + ph / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
        << "transform=\"rotate(-90 16 " << mt + ph / 2 << ")\">" << y_label << "</text>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        if (series[s].points.empty()) continue;
        out << "<polyline fill=\"none\" stroke=\"" << colors[s % 4]
            << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : series[s].points) out << px(x) << ',' << py(y) << ' ';
        out << "\"/>\n";
        out << "<text x=\"" << ml + pw - 6 << "\" y=\"" << mt + 16 + 16 * s
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
            << colors[s % 4] << "\">" << series[s].label << "</text>\n";
    }
    out << "</svg>\n";
}

} // namespace sigmatch
