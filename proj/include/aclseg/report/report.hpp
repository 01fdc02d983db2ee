#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/data/benchmark.hpp"
#include "aclseg/errors.hpp"
#include "aclseg/metrics/metrics.hpp"

namespace aclseg::report {

namespace fs = std::filesystem;

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

/// One finished sequential run on disk.
struct RunData {
    fs::path dir;
    std::string method;
    std::string variant;
    std::string schedule;
    metrics::AccuracyMatrix matrix;

    /// Methods are grouped by this label: the method name, plus the variant
    /// and schedule when they differ from the defaults.
    std::string label() const {
        std::string s = method;
        if (!variant.empty() && variant != "full") s += "[" + variant + "]";
        if (schedule != "OrderA") s += "@" + schedule;
        return s;
    }
};

inline bool is_run_dir(const fs::path& dir) {
    return fs::exists(dir / "matrix.csv") && fs::exists(dir / "config.json");
}

inline RunData load_run(const fs::path& dir) {
    const auto cfg = read_json(dir / "config.json");
    RunData r;
    r.dir = dir;
    r.method = cfg.value("method", std::string{});
    r.variant = cfg.value("variant", std::string{"full"});
    if (r.method.empty()) throw CorruptionError("no method recorded in " + (dir / "config.json").string());
    r.schedule = fs::exists(dir / "schedule.json") ? read_json(dir / "schedule.json").value("name", std::string{"custom"})
                                                   : std::string{"custom"};
    r.matrix = metrics::read_matrix_csv(dir / "matrix.csv");
    return r;
}

/// Expands each path into run directories: a run directory itself, or the
/// `seed_*` children written by repeated training.
inline std::vector<RunData> discover_runs(const std::vector<fs::path>& paths) {
    std::vector<RunData> runs;
    for (const auto& p : paths) {
        if (is_run_dir(p)) {
            runs.push_back(load_run(p));
            continue;
        }
        std::vector<fs::path> children;
        if (fs::is_directory(p))
            for (const auto& e : fs::directory_iterator(p))
                if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0 && is_run_dir(e.path()))
                    children.push_back(e.path());
        if (children.empty()) throw IoError("no finished run (matrix.csv and config.json) under " + p.string());
        std::sort(children.begin(), children.end());
        for (const auto& c : children) runs.push_back(load_run(c));
    }
    return runs;
}

/// Ideal references keyed by method; the empty key is the fallback.
class IdealBook {
public:
    /// Parses "method=path" or a bare path.
    void add(const std::string& spec) {
        const auto eq = spec.find('=');
        const std::string method = eq == std::string::npos ? "" : spec.substr(0, eq);
        const fs::path path = eq == std::string::npos ? spec : spec.substr(eq + 1);
        if (!fs::exists(path)) throw MissingPrerequisite("ideal reference " + path.string() + " does not exist");
        try {
            book_[method] = metrics::IdealScores::from_json(read_json(path));
        } catch (const nlohmann::json::exception& e) {
            throw CorruptionError("bad ideal reference " + path.string() + ": " + e.what());
        }
    }

    const metrics::IdealScores& for_method(const std::string& method) const {
        if (auto it = book_.find(method); it != book_.end()) return it->second;
        if (auto it = book_.find(""); it != book_.end()) return it->second;
        throw MissingPrerequisite("no ideal reference for method '" + method +
                                  "'; train one with `aclseg train --method joint` and pass --ideal");
    }

private:
    std::map<std::string, metrics::IdealScores> book_;
};

/// Runs sharing a label, with their scores against the matching ideal.
struct Group {
    std::string label;
    std::string method;
    std::vector<const RunData*> runs;
    std::vector<metrics::OmegaScores> scores;
    metrics::IdealScores ideal;
};

inline std::vector<Group> group_runs(const std::vector<RunData>& runs, const IdealBook& ideals) {
    std::vector<Group> groups;
    for (const auto& r : runs) {
        auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) { return g.label == r.label(); });
        if (it == groups.end()) {
            groups.push_back({r.label(), r.method, {}, {}, ideals.for_method(r.method)});
            it = std::prev(groups.end());
        }
        if (!it->runs.empty() && it->runs.front()->matrix.classes != r.matrix.classes) {
            throw ContractError("runs labelled " + it->label + " disagree on the class order");
        }
        it->runs.push_back(&r);
        it->scores.push_back(metrics::omega_scores(r.matrix, it->ideal));
    }
    return groups;
}

inline metrics::MeanStd aggregate(const std::vector<metrics::OmegaScores>& s, double metrics::OmegaScores::*field) {
    std::vector<double> v;
    for (const auto& x : s) v.push_back(x.*field);
    return metrics::mean_std(v);
}

/// One row per group; cells are "mean(std)" over runs.
inline std::string omega_table_csv(const std::vector<Group>& groups) {
    using S = metrics::OmegaScores;
    std::string out = "method,runs,omega_base,omega_new,omega_all,overall_dice\n";
    for (const auto& g : groups) {
        out += g.label + "," + std::to_string(g.runs.size());
        for (auto f : {&S::omega_base, &S::omega_new, &S::omega_all, &S::overall_dice})
            out += "," + metrics::format_mean_std(aggregate(g.scores, f));
        out += "\n";
    }
    return out;
}

/// Mean Dice of scheduled class j (1-based) after step i, over a group's runs.
inline double mean_entry(const Group& g, std::size_t i, std::size_t j) {
    double s = 0;
    for (const auto* r : g.runs) s += r->matrix.at(i, j);
    return s / static_cast<double>(g.runs.size());
}

/// One panel per group: Dice of every class against the number of learned
/// tasks, with the class's ideal as a dashed line.
inline std::string dice_curves_svg(const std::vector<Group>& groups) {
    static const char* colors[data::kNumClasses] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    constexpr double panel_w = 520, panel_h = 240, left = 60, top = 40, plot_w = 320, plot_h = 170;
    const double height = panel_h * static_cast<double>(std::max<std::size_t>(groups.size(), 1));
    char buf[256];
    std::string svg;
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                  "font-size=\"11\">\n",
                  panel_w, height);
    svg += buf;
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        const auto& classes = g.runs.front()->matrix.classes;
        const std::size_t steps = g.runs.front()->matrix.steps();
        const double oy = panel_h * static_cast<double>(gi);
        const auto x_of = [&](std::size_t step) {
            return left + plot_w * (steps > 1 ? static_cast<double>(step - 1) / static_cast<double>(steps - 1) : 0.5);
        };
        const auto y_of = [&](double dice) { return oy + top + plot_h * (1.0 - dice); };
        std::snprintf(buf, sizeof buf, "<g id=\"panel-%zu\">\n<text x=\"%.0f\" y=\"%.1f\" font-size=\"13\">%s (n=%zu)</text>\n",
                      gi, left, oy + 22, g.label.c_str(), g.runs.size());
        svg += buf;
        std::snprintf(buf, sizeof buf,
                      "<rect x=\"%.0f\" y=\"%.1f\" width=\"%.0f\" height=\"%.0f\" fill=\"none\" stroke=\"#444\"/>\n", left,
                      oy + top, plot_w, plot_h);
        svg += buf;
        for (double tick : {0.0, 0.5, 1.0}) {
            std::snprintf(buf, sizeof buf, "<text x=\"%.0f\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n", left - 6,
                          y_of(tick) + 4, tick);
            svg += buf;
        }
        for (std::size_t s = 1; s <= steps; ++s) {
            std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%zu</text>\n", x_of(s),
                          oy + top + plot_h + 15, s);
            svg += buf;
        }
        std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">tasks learned</text>\n",
                      left + plot_w / 2, oy + top + plot_h + 30);
        svg += buf;
        for (std::size_t j = 1; j <= steps; ++j) {
            const int cls = classes[j - 1];
            const char* color = colors[cls - 1];
            const std::string& name = data::task_spec(cls).name;
            std::snprintf(buf, sizeof buf,
                          "<line class=\"ideal\" x1=\"%.0f\" x2=\"%.0f\" y1=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" "
                          "stroke-dasharray=\"5,4\" stroke-width=\"1\"/>\n",
                          left, left + plot_w, y_of(g.ideal.of(cls)), y_of(g.ideal.of(cls)), color);
            svg += buf;
            std::string points;
            for (std::size_t i = j; i <= steps; ++i) {
                std::snprintf(buf, sizeof buf, "%s%.1f,%.1f", points.empty() ? "" : " ", x_of(i), y_of(mean_entry(g, i, j)));
                points += buf;
            }
            svg += "<polyline class=\"dice\" data-class=\"" + name + "\" points=\"" + points + "\" fill=\"none\" stroke=\"" +
                   color + "\" stroke-width=\"2\"/>\n";
            if (j == steps) {
                std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"%s\"/>\n", x_of(j),
                              y_of(mean_entry(g, j, j)), color);
                svg += buf;
            }
            const double ly = oy + top + 12 + 16 * static_cast<double>(j - 1);
            std::snprintf(buf, sizeof buf,
                          "<line x1=\"%.0f\" x2=\"%.0f\" y1=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"2\"/>"
                          "<text x=\"%.0f\" y=\"%.1f\">%s</text>\n",
                          left + plot_w + 20, left + plot_w + 40, ly - 4, ly - 4, color, left + plot_w + 46, ly,
                          name.c_str());
            svg += buf;
        }
        svg += "</g>\n";
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace aclseg::report
