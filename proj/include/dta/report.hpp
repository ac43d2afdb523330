#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dta/metrics.hpp"

namespace dta {

/// Condensed view of one training run's metrics file.
struct RunSummary {
    std::string label;
    std::string pair;
    bool source_only = false;
    int epochs = 0;
    double best_accuracy = 0.0;
    double final_accuracy = 0.0;
};

inline RunSummary summarize_metrics(const std::filesystem::path& path) {
    const MetricsFile file = read_metrics(path);
    if (file.rows.empty()) throw io_error("metrics file has no rows: " + path.string());
    RunSummary s;
    s.label = path.stem().string() == "metrics" && path.has_parent_path()
                  ? path.parent_path().filename().string()
                  : path.stem().string();
    auto meta = [&](const char* key) {
        auto it = file.meta.find(key);
        return it == file.meta.end() ? std::string() : it->second;
    };
    s.pair = meta("pair");
    auto zeroish = [&](const char* key) {
        const std::string v = meta(key);
        return v.empty() || std::stod(v) == 0.0;
    };
    s.source_only = zeroish("lambda1") && zeroish("lambda2") && zeroish("lambda3");
    s.epochs = static_cast<int>(file.rows.size());
    s.final_accuracy = file.rows.back().target_accuracy;
    for (const auto& r : file.rows) s.best_accuracy = std::max(s.best_accuracy, r.target_accuracy);
    return s;
}

inline std::string render_comparison_table(const std::vector<RunSummary>& runs) {
    std::ostringstream os;
    os << std::left << std::setw(28) << "run" << std::setw(14) << "pair" << std::setw(14) << "mode"
       << std::setw(10) << "epochs" << std::setw(12) << "best acc" << "final acc\n";
    os << std::string(86, '-') << "\n";
    for (const auto& r : runs) {
        os << std::left << std::setw(28) << r.label << std::setw(14) << r.pair << std::setw(14)
           << (r.source_only ? "source-only" : "adapted") << std::setw(10) << r.epochs
           << std::setw(12) << std::fixed << std::setprecision(4) << r.best_accuracy
           << std::setprecision(4) << r.final_accuracy << "\n";
    }
    return os.str();
}

/// Minimal self-contained SVG line chart (one polyline per series).
struct ChartSeries {
    std::string name;
    std::vector<double> values;
};

inline void write_line_chart_svg(const std::filesystem::path& path, const std::string& title,
                                 const std::vector<ChartSeries>& series, const std::string& y_label) {
    const int w = 720, h = 420, ml = 64, mr = 24, mt = 40, mb = 44;
    double lo = 0.0, hi = 1e-9;
    std::size_t n = 2;
    for (const auto& s : series) {
        n = std::max(n, s.values.size());
        for (double v : s.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (hi <= lo) hi = lo + 1.0;
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write chart " + path.string());
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-family='sans-serif' "
           "font-size='16'>" << title << "</text>\n";
    // axes
    out << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    out << "<text x='16' y='" << (mt + h - mb) / 2 << "' font-family='sans-serif' font-size='12' "
           "transform='rotate(-90 16 " << (mt + h - mb) / 2 << ")'>" << y_label << "</text>\n";
    out << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 12
        << "' text-anchor='middle' font-family='sans-serif' font-size='12'>epoch</text>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        const double v = lo + (hi - lo) * tick / 4.0;
        const double y = h - mb - (h - mt - mb) * tick / 4.0;
        out << "<text x='" << ml - 6 << "' y='" << y + 4
            << "' text-anchor='end' font-family='sans-serif' font-size='11'>" << std::setprecision(4)
            << v << "</text>\n";
        out << "<line x1='" << ml << "' y1='" << y << "' x2='" << w - mr << "' y2='" << y
            << "' stroke='#dddddd'/>\n";
    }
    int ci = 0;
    for (const auto& s : series) {
        std::ostringstream pts;
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            const double x = ml + (w - ml - mr) * static_cast<double>(i) /
                                      static_cast<double>(std::max<std::size_t>(1, n - 1));
            const double y = h - mb - (h - mt - mb) * (s.values[i] - lo) / (hi - lo);
            pts << x << ',' << y << ' ';
        }
        const char* color = colors[ci % 6];
        out << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='"
            << pts.str() << "'/>\n";
        out << "<text x='" << w - mr - 4 << "' y='" << mt + 16 * ci
            << "' text-anchor='end' font-family='sans-serif' font-size='12' fill='" << color << "'>"
            << s.name << "</text>\n";
        ++ci;
    }
    out << "</svg>\n";
}

/// Writes <label>_loss.svg and <label>_accuracy.svg for one metrics file,
/// returning the created paths.
inline std::vector<std::filesystem::path> write_run_charts(const std::filesystem::path& metrics_path,
                                                           const std::filesystem::path& out_dir) {
    const MetricsFile file = read_metrics(metrics_path);
    const RunSummary s = summarize_metrics(metrics_path);
    std::vector<double> total, task, acc;
    for (const auto& r : file.rows) {
        total.push_back(r.total);
        task.push_back(r.task);
        acc.push_back(r.target_accuracy);
    }
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    written.push_back(out_dir / (s.label + "_loss.svg"));
    write_line_chart_svg(written.back(), s.label + " training loss",
                         {{"total", total}, {"task", task}}, "loss");
    written.push_back(out_dir / (s.label + "_accuracy.svg"));
    write_line_chart_svg(written.back(), s.label + " target accuracy", {{"accuracy", acc}},
                         "accuracy");
    return written;
}

}  // namespace dta
