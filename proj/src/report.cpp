#include "poslab/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "poslab/error.hpp"

namespace poslab {
namespace {

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), format, v);
    return buf;
}

std::string rate_tag(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", rate);
    std::string s = buf;
    for (char& c : s)
        if (c == '.') c = 'p';
    return s;
}

const char* arm_color(Arm arm) {
    switch (arm) {
        case Arm::vision: return "#1f77b4";
        case Arm::no_vision: return "#d62728";
        case Arm::shuffled: return "#7f7f7f";
    }
    return "#000000";
}

const char* arm_dash(Arm arm) {
    switch (arm) {
        case Arm::vision: return "";                             // solid
        case Arm::no_vision: return " stroke-dasharray=\"7,4\"";  // dashed
        case Arm::shuffled: return " stroke-dasharray=\"2,3\"";
    }
    return "";
}

}  // namespace

std::string summary_csv(const AggregateTable& table) {
    std::string out = "arm,rate,step,macro_f1,f1_range,loss,rouge_l,n_seeds,delta_f1\n";
    auto delta_for = [&](Arm arm, double rate, int step) -> std::string {
        if (arm != Arm::vision) return "";
        for (const auto& d : table.deltas)
            if (d.rate == rate && d.step == step) return fmt("%.4f", d.delta_f1);
        return "";
    };
    std::vector<AggregateCell> cells = table.cells;
    std::sort(cells.begin(), cells.end(), [](const AggregateCell& a, const AggregateCell& b) {
        if (a.rate != b.rate) return a.rate < b.rate;
        if (a.arm != b.arm) return static_cast<int>(a.arm) < static_cast<int>(b.arm);
        return a.step < b.step;
    });
    for (const auto& c : cells) {
        out += std::string(to_string(c.arm)) + "," + fmt("%g", c.rate) + "," +
               std::to_string(c.step) + "," + fmt("%.4f", c.mean_f1) + "," +
               fmt("%.4f", c.range_f1) + "," + fmt("%.6f", c.mean_loss) + "," +
               fmt("%.6f", c.mean_rouge) + "," + std::to_string(c.n_seeds) + "," +
               delta_for(c.arm, c.rate, c.step) + "\n";
    }
    return out;
}

std::string learning_curve_svg(const AggregateTable& table, double rate) {
    const int W = 720, H = 480, ML = 64, MR = 24, MT = 40, MB = 56;
    const int PW = W - ML - MR, PH = H - MT - MB;

    std::set<int> step_set;
    std::set<Arm> arms;
    for (const auto& c : table.cells)
        if (c.rate == rate) {
            step_set.insert(c.step);
            arms.insert(c.arm);
        }
    if (step_set.empty())
        throw Error(Error::Kind::evaluation, "no completed runs at the requested rate");
    const int max_step = *step_set.rbegin();

    auto x_of = [&](int step) { return ML + PW * static_cast<double>(step) / max_step; };
    auto y_of = [&](double f1) { return MT + PH * (1.0 - f1 / 100.0); };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
           "\" height=\"" + std::to_string(H) + "\" viewBox=\"0 0 " + std::to_string(W) + " " +
           std::to_string(H) + "\">\n";
    svg += "<rect width=\"" + std::to_string(W) + "\" height=\"" + std::to_string(H) +
           "\" fill=\"white\"/>\n";
    svg += "<text x=\"" + std::to_string(W / 2) + "\" y=\"24\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"16\">hierarchical preference, injection rate " +
           fmt("%g", rate) + "</text>\n";

    // axes
    svg += "<line x1=\"" + std::to_string(ML) + "\" y1=\"" + std::to_string(MT) + "\" x2=\"" +
           std::to_string(ML) + "\" y2=\"" + std::to_string(MT + PH) +
           "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    svg += "<line x1=\"" + std::to_string(ML) + "\" y1=\"" + std::to_string(MT + PH) + "\" x2=\"" +
           std::to_string(ML + PW) + "\" y2=\"" + std::to_string(MT + PH) +
           "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    for (int f1 = 0; f1 <= 100; f1 += 25) {
        svg += "<text x=\"" + std::to_string(ML - 8) + "\" y=\"" + fmt("%.1f", y_of(f1) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" +
               std::to_string(f1) + "</text>\n";
        svg += "<line x1=\"" + std::to_string(ML - 4) + "\" y1=\"" + fmt("%.1f", y_of(f1)) +
               "\" x2=\"" + std::to_string(ML) + "\" y2=\"" + fmt("%.1f", y_of(f1)) +
               "\" stroke=\"black\"/>\n";
    }
    for (int step : step_set) {
        svg += "<text x=\"" + fmt("%.1f", x_of(step)) + "\" y=\"" + std::to_string(MT + PH + 20) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
               std::to_string(step) + "</text>\n";
        svg += "<line x1=\"" + fmt("%.1f", x_of(step)) + "\" y1=\"" + std::to_string(MT + PH) +
               "\" x2=\"" + fmt("%.1f", x_of(step)) + "\" y2=\"" + std::to_string(MT + PH + 4) +
               "\" stroke=\"black\"/>\n";
    }
    svg += "<text x=\"" + std::to_string(ML + PW / 2) + "\" y=\"" + std::to_string(H - 14) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">parameter "
           "update steps</text>\n";
    svg += "<text x=\"18\" y=\"" + std::to_string(MT + PH / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
           "transform=\"rotate(-90 18 " +
           std::to_string(MT + PH / 2) + ")\">macro-F1 (x100)</text>\n";

    // chance rate
    svg += "<line x1=\"" + std::to_string(ML) + "\" y1=\"" + fmt("%.1f", y_of(50)) + "\" x2=\"" +
           std::to_string(ML + PW) + "\" y2=\"" + fmt("%.1f", y_of(50)) +
           "\" stroke=\"#aaaaaa\" stroke-dasharray=\"3,5\"/>\n";
    svg += "<text x=\"" + std::to_string(ML + PW - 4) + "\" y=\"" + fmt("%.1f", y_of(50) - 6) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
           "fill=\"#888888\">chance</text>\n";

    int legend_y = MT + 14;
    for (Arm arm : arms) {
        std::string points;
        for (int step : step_set)
            for (const auto& c : table.cells)
                if (c.rate == rate && c.arm == arm && c.step == step)
                    points += fmt("%.1f", x_of(step)) + "," + fmt("%.1f", y_of(c.mean_f1)) + " ";
        if (points.empty()) continue;
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(arm_color(arm)) +
               "\" stroke-width=\"2\"" + arm_dash(arm) + " points=\"" + points + "\"/>\n";
        for (int step : step_set)
            for (const auto& c : table.cells)
                if (c.rate == rate && c.arm == arm && c.step == step)
                    svg += "<circle cx=\"" + fmt("%.1f", x_of(step)) + "\" cy=\"" +
                           fmt("%.1f", y_of(c.mean_f1)) + "\" r=\"3\" fill=\"" + arm_color(arm) +
                           "\"/>\n";
        svg += "<line x1=\"" + std::to_string(ML + 12) + "\" y1=\"" + std::to_string(legend_y) +
               "\" x2=\"" + std::to_string(ML + 44) + "\" y2=\"" + std::to_string(legend_y) +
               "\" stroke=\"" + arm_color(arm) + "\" stroke-width=\"2\"" + arm_dash(arm) + "/>\n";
        svg += "<text x=\"" + std::to_string(ML + 50) + "\" y=\"" + std::to_string(legend_y + 4) +
               "\" font-family=\"sans-serif\" font-size=\"12\">" + to_string(arm) + "</text>\n";
        legend_y += 18;
    }
    svg += "</svg>\n";
    return svg;
}

void write_reports(const AggregateTable& table, const std::filesystem::path& reports_dir) {
    std::filesystem::create_directories(reports_dir);
    {
        std::ofstream f(reports_dir / "summary.csv", std::ios::trunc);
        if (!f) throw Error(Error::Kind::io, "cannot write summary.csv");
        f << summary_csv(table);
    }
    std::set<double> rates;
    for (const auto& c : table.cells) rates.insert(c.rate);
    for (double rate : rates) {
        std::ofstream f(reports_dir / ("curves_rate_" + rate_tag(rate) + ".svg"), std::ios::trunc);
        if (!f) throw Error(Error::Kind::io, "cannot write learning-curve svg");
        f << learning_curve_svg(table, rate);
    }
}

}  // namespace poslab
