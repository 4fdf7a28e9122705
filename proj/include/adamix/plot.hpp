#pragma once

// Static SVG charts for metrics and ablation CSV files.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "adamix/errors.hpp"

namespace adamix {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    [[nodiscard]] std::ptrdiff_t column(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        return it == header.end() ? -1 : it - header.begin();
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline CsvTable read_csv(std::istream& in) {
    CsvTable t;
    std::string line;
    if (!std::getline(in, line) || line.empty()) throw DataError("csv: missing header");
    t.header = split_csv_line(line);
    for (std::size_t number = 2; std::getline(in, line); ++number) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != t.header.size()) {
            throw DataError("csv:" + std::to_string(number) + ": expected " + std::to_string(t.header.size()) + " cells");
        }
        t.rows.push_back(std::move(cells));
    }
    return t;
}

namespace detail {

inline double cell_value(const std::string& s) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    return std::numeric_limits<double>::quiet_NaN();
}

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
    return colors[i % 6];
}

}  // namespace detail

/// Line chart of every *_loss and *_accuracy column against `step` (metrics
/// CSV), or grouped bars of every *_mean column with +-std whiskers, one
/// group per row (ablation CSV).
inline std::string render_svg(const CsvTable& table, const std::string& title) {
    constexpr double width = 720, height = 420, left = 60, right = 170, top = 40, bottom = 50;
    const double plot_w = width - left - right, plot_h = height - top - bottom;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\"" << top + plot_h
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";

    auto legend = [&](std::size_t i, const std::string& label) {
        const double y = top + 16.0 * static_cast<double>(i);
        svg << "<rect x=\"" << left + plot_w + 12 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\"" << detail::palette(i)
            << "\"/><text x=\"" << left + plot_w + 26 << "\" y=\"" << y + 9
            << "\" font-family=\"sans-serif\" font-size=\"11\">" << label << "</text>\n";
    };
    auto y_axis = [&](double lo, double hi) {
        for (int k = 0; k <= 4; ++k) {
            const double v = lo + (hi - lo) * k / 4.0;
            const double y = top + plot_h - plot_h * k / 4.0;
            svg << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
                << std::round(v * 1000.0) / 1000.0 << "</text>\n";
        }
    };

    const auto step_col = table.column("step");
    if (step_col >= 0) {
        std::vector<std::size_t> series;
        for (std::size_t c = 0; c < table.header.size(); ++c) {
            const std::string& h = table.header[c];
            if (h.ends_with("_loss") || h.ends_with("_accuracy")) series.push_back(c);
        }
        double xmax = 1, ymax = 1e-9;
        for (const auto& row : table.rows) {
            xmax = std::max(xmax, detail::cell_value(row[static_cast<std::size_t>(step_col)]));
            for (std::size_t c : series) {
                const double v = detail::cell_value(row[c]);
                if (std::isfinite(v)) ymax = std::max(ymax, v);
            }
        }
        y_axis(0.0, ymax);
        for (std::size_t s = 0; s < series.size(); ++s) {
            svg << "<polyline fill=\"none\" stroke=\"" << detail::palette(s) << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& row : table.rows) {
                const double x = left + plot_w * detail::cell_value(row[static_cast<std::size_t>(step_col)]) / xmax;
                const double v = detail::cell_value(row[series[s]]);
                if (!std::isfinite(v)) continue;
                svg << x << ',' << top + plot_h - plot_h * v / ymax << ' ';
            }
            svg << "\"/>\n";
            legend(s, table.header[series[s]]);
        }
    } else {
        std::vector<std::size_t> means;
        for (std::size_t c = 0; c < table.header.size(); ++c)
            if (table.header[c].ends_with("_mean") && !table.header[c].starts_with("train_loss")) means.push_back(c);
        if (means.empty()) throw DataError("csv: nothing to plot (no step or *_mean columns)");
        double ymax = 1e-9;
        for (const auto& row : table.rows)
            for (std::size_t c : means) {
                const double v = detail::cell_value(row[c]);
                if (std::isfinite(v)) ymax = std::max(ymax, v);
            }
        y_axis(0.0, ymax);
        const double group_w = plot_w / static_cast<double>(std::max<std::size_t>(1, table.rows.size()));
        const double bar_w = group_w * 0.8 / static_cast<double>(means.size());
        for (std::size_t r = 0; r < table.rows.size(); ++r) {
            for (std::size_t m = 0; m < means.size(); ++m) {
                const double v = detail::cell_value(table.rows[r][means[m]]);
                if (!std::isfinite(v)) continue;
                const double x = left + group_w * static_cast<double>(r) + group_w * 0.1 + bar_w * static_cast<double>(m);
                const double h = plot_h * v / ymax;
                svg << "<rect x=\"" << x << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar_w << "\" height=\"" << h
                    << "\" fill=\"" << detail::palette(m) << "\"/>\n";
                const std::string std_name = table.header[means[m]].substr(0, table.header[means[m]].size() - 5) + "_std";
                const auto sc = table.column(std_name);
                if (sc >= 0) {
                    const double sd = detail::cell_value(table.rows[r][static_cast<std::size_t>(sc)]);
                    if (std::isfinite(sd) && sd > 0) {
                        const double cx = x + bar_w / 2;
                        svg << "<line x1=\"" << cx << "\" x2=\"" << cx << "\" y1=\"" << top + plot_h - plot_h * (v + sd) / ymax
                            << "\" y2=\"" << top + plot_h - plot_h * (v - sd) / ymax << "\" stroke=\"black\"/>\n";
                    }
                }
            }
            svg << "<text x=\"" << left + group_w * (static_cast<double>(r) + 0.5) << "\" y=\"" << top + plot_h + 16
                << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"9\">" << r + 1 << "</text>\n";
        }
        for (std::size_t m = 0; m < means.size(); ++m) legend(m, table.header[means[m]]);
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace adamix
