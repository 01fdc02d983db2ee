#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/data/benchmark.hpp"
#include "aclseg/errors.hpp"

namespace aclseg::metrics {

inline constexpr double kDiceEps = 1e-6;

/// Dice of two binary masks, (2|A∩B| + eps) / (|A| + |B| + eps). Any
/// indexable ranges; nonzero means foreground.
template <typename A, typename B>
double dice_masks(const A& a, const B& b, double eps = kDiceEps) {
    if (std::size(a) != std::size(b)) {
        throw ShapeError("dice: mask sizes " + std::to_string(std::size(a)) + " and " + std::to_string(std::size(b)) +
                         " differ");
    }
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < std::size(a); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        inter += x && y;
        na += x;
        nb += y;
    }
    return (2.0 * static_cast<double>(inter) + eps) / (static_cast<double>(na + nb) + eps);
}

/// Dice of σ(logits) > threshold against a binary ground truth.
template <typename L, typename G>
double dice(const L& logits, const G& gt, double threshold = 0.5, double eps = kDiceEps) {
    if (std::size(logits) != std::size(gt)) {
        throw ShapeError("dice: prediction has " + std::to_string(std::size(logits)) + " pixels, ground truth " +
                         std::to_string(std::size(gt)));
    }
    // σ(l) > t  ⇔  l > logit(t)
    const double cut = std::log(threshold / (1.0 - threshold));
    std::vector<unsigned char> pred(std::size(logits));
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = static_cast<double>(logits[i]) > cut;
    return dice_masks(pred, gt, eps);
}

/// Lower-triangular Dice table: row i (1-based step) holds the test Dice of
/// the first i scheduled classes after learning i classes.
struct AccuracyMatrix {
    std::vector<int> classes;  // schedule order, class ids
    std::vector<std::vector<double>> rows;

    AccuracyMatrix() = default;
    explicit AccuracyMatrix(std::vector<int> schedule) : classes(std::move(schedule)) {}

    std::size_t steps() const { return rows.size(); }

    void append_row(std::vector<double> row) {
        if (row.size() != rows.size() + 1) {
            throw ContractError("accuracy matrix row " + std::to_string(rows.size() + 1) + " needs " +
                                std::to_string(rows.size() + 1) + " entries, got " + std::to_string(row.size()));
        }
        if (rows.size() >= classes.size()) throw ContractError("accuracy matrix already has a row per scheduled class");
        for (double v : row)
            if (!(v >= 0.0 && v <= 1.0)) throw ContractError("accuracy entries must lie in [0, 1]");
        rows.push_back(std::move(row));
    }

    /// α[i][j], both 1-based.
    double at(std::size_t i, std::size_t j) const {
        if (i < 1 || i > rows.size() || j < 1 || j > i) {
            throw ContractError("accuracy matrix index (" + std::to_string(i) + ", " + std::to_string(j) +
                                ") out of range");
        }
        return rows[i - 1][j - 1];
    }
};

/// Offline joint-training Dice per class id (1..5).
struct IdealScores {
    std::array<double, data::kNumClasses> per_class{};

    double of(int class_id) const {
        if (class_id < 1 || class_id > data::kNumClasses) throw ContractError("class id out of range");
        return per_class[static_cast<std::size_t>(class_id - 1)];
    }

    std::vector<double> ordered(std::span<const int> schedule) const {
        std::vector<double> out;
        for (int c : schedule) out.push_back(of(c));
        return out;
    }

    /// Mean of the first i ideals under `schedule`, for i = 2..T.
    std::vector<double> running_means(std::span<const int> schedule) const {
        const auto v = ordered(schedule);
        std::vector<double> out;
        double acc = v.empty() ? 0.0 : v[0];
        for (std::size_t i = 1; i < v.size(); ++i) {
            acc += v[i];
            out.push_back(acc / static_cast<double>(i + 1));
        }
        return out;
    }

    nlohmann::json to_json(std::span<const int> schedule) const {
        nlohmann::json pc = nlohmann::json::object();
        for (int c = 1; c <= data::kNumClasses; ++c) pc[data::task_spec(c).name] = of(c);
        return {{"per_class", pc},
                {"schedule", std::vector<int>(schedule.begin(), schedule.end())},
                {"running_means", running_means(schedule)}};
    }

    static IdealScores from_json(const nlohmann::json& j) {
        IdealScores s;
        const auto& pc = j.at("per_class");
        for (int c = 1; c <= data::kNumClasses; ++c) {
            const double v = pc.at(data::task_spec(c).name).get<double>();
            if (!(v >= 0.0 && v <= 1.0)) throw CorruptionError("ideal score out of [0, 1] for " + data::task_spec(c).name);
            s.per_class[static_cast<std::size_t>(c - 1)] = v;
        }
        return s;
    }
};

struct OmegaScores {
    double omega_base = 0, omega_new = 0, omega_all = 0, overall_dice = 0;
};

namespace detail {

inline void require_steps(const AccuracyMatrix& m, const char* what) {
    if (m.steps() < 2) throw ContractError(std::string(what) + " needs at least two learned classes");
}

inline double nonzero_ideal(double v, const std::string& what) {
    if (v == 0.0) throw DegenerateIdealError(what + " is zero; the score would divide by zero");
    return v;
}

}  // namespace detail

/// Mean retention of the first class relative to its ideal, over steps 2..T.
inline double omega_base(const AccuracyMatrix& m, const IdealScores& ideal) {
    detail::require_steps(m, "omega_base");
    const double base = detail::nonzero_ideal(ideal.of(m.classes.at(0)), "ideal Dice of the base class");
    double s = 0;
    for (std::size_t i = 2; i <= m.steps(); ++i) s += m.at(i, 1) / base;
    return s / static_cast<double>(m.steps() - 1);
}

/// Mean Dice of each newly learned class relative to its ideal, over steps 2..T.
inline double omega_new(const AccuracyMatrix& m, const IdealScores& ideal) {
    detail::require_steps(m, "omega_new");
    double s = 0;
    for (std::size_t i = 2; i <= m.steps(); ++i) {
        const int c = m.classes.at(i - 1);
        s += m.at(i, i) / detail::nonzero_ideal(ideal.of(c), "ideal Dice of class " + std::to_string(c));
    }
    return s / static_cast<double>(m.steps() - 1);
}

/// Mean over steps 2..T of the row mean relative to the running ideal mean.
inline double omega_all(const AccuracyMatrix& m, const IdealScores& ideal) {
    detail::require_steps(m, "omega_all");
    const auto means = ideal.running_means(std::span<const int>(m.classes).first(m.steps()));
    double s = 0;
    for (std::size_t i = 2; i <= m.steps(); ++i) {
        const auto& row = m.rows[i - 1];
        const double row_mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(i);
        s += row_mean / detail::nonzero_ideal(means[i - 2], "running ideal mean at step " + std::to_string(i));
    }
    return s / static_cast<double>(m.steps() - 1);
}

inline double overall_dice(std::span<const double> final_row) {
    if (final_row.empty()) return 0.0;
    return std::accumulate(final_row.begin(), final_row.end(), 0.0) / static_cast<double>(final_row.size());
}

inline OmegaScores omega_scores(const AccuracyMatrix& m, const IdealScores& ideal) {
    return {omega_base(m, ideal), omega_new(m, ideal), omega_all(m, ideal), overall_dice(m.rows.back())};
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string matrix_csv(const AccuracyMatrix& m) {
    std::string out = "step,class,dice\n";
    for (std::size_t i = 1; i <= m.steps(); ++i)
        for (std::size_t j = 1; j <= i; ++j)
            out += std::to_string(i) + "," + std::to_string(m.classes[j - 1]) + "," + format_g17(m.at(i, j)) + "\n";
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("write failed for " + path.string());
}

inline void write_matrix_csv(const std::filesystem::path& path, const AccuracyMatrix& m) {
    write_text(path, matrix_csv(m));
}

/// Parses matrix.csv; the class order is taken from the last row.
inline AccuracyMatrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "step,class,dice") throw CorruptionError("bad header in " + path.string());
    std::map<std::size_t, std::vector<std::pair<int, double>>> steps;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string a, b, c;
        if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c)) {
            throw CorruptionError("malformed line in " + path.string() + ": " + line);
        }
        try {
            steps[std::stoul(a)].emplace_back(std::stoi(b), std::stod(c));
        } catch (const std::exception&) {
            throw CorruptionError("malformed line in " + path.string() + ": " + line);
        }
    }
    if (steps.empty()) throw CorruptionError("empty accuracy matrix in " + path.string());
    std::vector<int> classes;
    for (const auto& [cls, v] : steps.rbegin()->second) classes.push_back(cls);
    AccuracyMatrix m(classes);
    std::size_t expect = 1;
    for (const auto& [step, entries] : steps) {
        if (step != expect++) throw CorruptionError("missing step in " + path.string());
        std::vector<double> row;
        for (std::size_t j = 0; j < entries.size(); ++j) {
            if (entries[j].first != classes.at(j)) throw CorruptionError("inconsistent class order in " + path.string());
            row.push_back(entries[j].second);
        }
        m.append_row(std::move(row));
    }
    return m;
}

inline nlohmann::json to_json(const OmegaScores& s) {
    return {{"omega_base", s.omega_base}, {"omega_new", s.omega_new}, {"omega_all", s.omega_all},
            {"overall_dice", s.overall_dice}};
}

inline OmegaScores omega_from_json(const nlohmann::json& j) {
    return {j.at("omega_base").get<double>(), j.at("omega_new").get<double>(), j.at("omega_all").get<double>(),
            j.at("overall_dice").get<double>()};
}

// ---------------------------------------------------------------------------
// Aggregation over repeated runs

struct MeanStd {
    double mean = 0, std = 0;
};

/// Mean and population standard deviation.
inline MeanStd mean_std(std::span<const double> v) {
    if (v.empty()) return {};
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / n)};
}

/// "m.mmm(s.sss)"
inline std::string format_mean_std(const MeanStd& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f(%.3f)", s.mean, s.std);
    return buf;
}

}  // namespace aclseg::metrics
