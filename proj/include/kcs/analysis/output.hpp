#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kcs/analysis/subnet.hpp"
#include "kcs/core/error.hpp"

namespace kcs::analysis {

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("io", "cannot write " + path.string());
    out << std::setprecision(10);
    return out;
}

inline std::string fmt(double v, int digits = 3) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

/// White to dark red.
inline std::string heat_color(double frac) {
    frac = std::clamp(frac, 0.0, 1.0);
    const int g = static_cast<int>(std::lround(255 * (1.0 - frac)));
    const int r = static_cast<int>(std::lround(255 - 80 * frac));
    std::ostringstream s;
    s << "rgb(" << r << ',' << g << ',' << g << ')';
    return s.str();
}

}  // namespace detail

inline void write_density_csv(const std::filesystem::path& path, const DensityMap& map) {
    auto out = detail::open_out(path);
    out << "module,head,size,set,density\n";
    for (const auto& m : map.modules) out << m.path << ",," << m.size << ',' << m.set << ',' << m.density << '\n';
    for (const auto& h : map.heads) out << h.path << ',' << h.head << ',' << h.size << ',' << h.set << ',' << h.density << '\n';
}

inline void write_jaccard_csv(const std::filesystem::path& path, const std::vector<std::string>& names,
                              const std::vector<std::vector<double>>& matrix) {
    auto out = detail::open_out(path);
    out << "mask";
    for (const auto& n : names) out << ',' << n;
    out << '\n';
    for (std::size_t i = 0; i < names.size(); ++i) {
        out << names[i];
        for (double v : matrix[i]) out << ',' << v;
        out << '\n';
    }
}

inline void write_module_jaccard_csv(const std::filesystem::path& path,
                                     const std::map<std::string, std::map<std::string, double>>& pairs) {
    auto out = detail::open_out(path);
    out << "pair,module,jaccard\n";
    for (const auto& [pair, mods] : pairs)
        for (const auto& [mod, v] : mods) out << pair << ',' << mod << ',' << v << '\n';
}

inline void write_sweep_csv(const std::filesystem::path& path, const SweepResult& sweep) {
    auto out = detail::open_out(path);
    out << "seed,point,requested_percent,changed_units,sparsity";
    std::vector<std::string> names;
    if (!sweep.points.empty())
        for (const auto& [name, _] : sweep.points.front().report.datasets) names.push_back(name);
    for (const auto& n : names) out << ',' << n << "_delta_ppl";
    const bool baseline = !sweep.points.empty() && sweep.points.front().baseline.has_value();
    if (baseline)
        for (const auto& n : names) out << ",random_" << n << "_delta_ppl";
    out << '\n';
    for (const auto& p : sweep.points) {
        out << p.seed << ',' << p.point << ',' << p.requested_percent << ',' << p.changed_units << ','
            << p.report.sparsity;
        for (const auto& n : names) out << ',' << p.report.delta_ppl(n);
        if (baseline)
            for (const auto& n : names) out << ',' << p.baseline->delta_ppl(n);
        out << '\n';
    }
}

/// Heatmap of module densities, one row per masked block and one column per
/// matrix kind.
inline void write_density_svg(const std::filesystem::path& path, const DensityMap& map) {
    std::vector<std::string> rows, cols;
    std::map<std::pair<std::string, std::string>, double> cell;
    double peak = 0.0;
    for (const auto& m : map.modules) {
        const auto dot = m.path.find('.', m.path.find('.') + 1);
        const std::string row = dot == std::string::npos ? m.path : m.path.substr(0, dot);
        const std::string col = dot == std::string::npos ? m.path : m.path.substr(dot + 1);
        if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
        if (std::find(cols.begin(), cols.end(), col) == cols.end()) cols.push_back(col);
        cell[{row, col}] = m.density;
        peak = std::max(peak, m.density);
    }
    const int cw = 110, ch = 36, left = 90, top = 40;
    auto out = detail::open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + cw * static_cast<int>(cols.size()) + 20
        << "\" height=\"" << top + ch * static_cast<int>(rows.size()) + 20 << "\" font-family=\"monospace\" font-size=\"11\">\n";
    for (std::size_t c = 0; c < cols.size(); ++c)
        out << "<text x=\"" << left + cw * static_cast<int>(c) + 4 << "\" y=\"" << top - 8 << "\">"
            << detail::xml_escape(cols[c]) << "</text>\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int y = top + ch * static_cast<int>(r);
        out << "<text x=\"4\" y=\"" << y + ch / 2 + 4 << "\">" << detail::xml_escape(rows[r]) << "</text>\n";
        for (std::size_t c = 0; c < cols.size(); ++c) {
            auto it = cell.find({rows[r], cols[c]});
            if (it == cell.end()) continue;
            const int x = left + cw * static_cast<int>(c);
            out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cw - 2 << "\" height=\"" << ch - 2
                << "\" fill=\"" << detail::heat_color(peak > 0 ? it->second / peak : 0.0) << "\"/>\n";
            out << "<text x=\"" << x + 6 << "\" y=\"" << y + ch / 2 + 4 << "\">" << detail::fmt(it->second, 2)
                << "%</text>\n";
        }
    }
    out << "</svg>\n";
}

/// TargetKG delta PPL against sparsity, one polyline per seed.
inline void write_sweep_svg(const std::filesystem::path& path, const SweepResult& sweep,
                            const std::string& dataset = eval::kTargetKG) {
    const int w = 520, h = 320, pad = 50;
    auto out = detail::open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" font-family=\"monospace\" font-size=\"11\">\n";
    if (sweep.points.empty()) {
        out << "<text x=\"" << pad << "\" y=\"" << pad << "\">empty sweep</text>\n</svg>\n";
        return;
    }
    double x0 = 1e300, x1 = -1e300, y0 = 0.0, y1 = -1e300;
    for (const auto& p : sweep.points) {
        x0 = std::min(x0, p.report.sparsity);
        x1 = std::max(x1, p.report.sparsity);
        y0 = std::min(y0, p.report.delta_ppl(dataset));
        y1 = std::max(y1, p.report.delta_ppl(dataset));
    }
    if (x1 - x0 < 1e-9) x1 = x0 + 1.0;
    if (y1 - y0 < 1e-9) y1 = y0 + 1.0;
    auto px = [&](double x) { return pad + (x - x0) / (x1 - x0) * (w - 2 * pad); };
    auto py = [&](double y) { return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad); };
    out << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad
        << "\" stroke=\"black\"/>\n<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\""
        << h - pad << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << w / 2 - 30 << "\" y=\"" << h - 12 << "\">sparsity %</text>\n";
    out << "<text x=\"4\" y=\"" << pad - 12 << "\">" << detail::xml_escape(dataset) << " dPPL</text>\n";
    out << "<text x=\"" << pad << "\" y=\"" << h - pad + 14 << "\">" << detail::fmt(x0) << "</text>\n";
    out << "<text x=\"" << w - pad - 40 << "\" y=\"" << h - pad + 14 << "\">" << detail::fmt(x1) << "</text>\n";
    out << "<text x=\"4\" y=\"" << py(y1) + 4 << "\">" << detail::fmt(y1, 1) << "</text>\n";
    out << "<text x=\"4\" y=\"" << py(y0) + 4 << "\">" << detail::fmt(y0, 1) << "</text>\n";

    std::map<std::uint64_t, std::vector<const SweepPoint*>> by_seed;
    for (const auto& p : sweep.points) by_seed[p.seed].push_back(&p);
    static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
    std::size_t k = 0;
    for (const auto& [seed, pts] : by_seed) {
        out << "<polyline fill=\"none\" stroke=\"" << kColors[k++ % 6] << "\" points=\"";
        for (const auto* p : pts) out << px(p->report.sparsity) << ',' << py(p->report.delta_ppl(dataset)) << ' ';
        out << "\"/>\n";
    }
    out << "</svg>\n";
}

}  // namespace kcs::analysis
