// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
// The trend criteria train every method at the default settings on the
// 128x128 benchmark, which takes on the order of an hour on one core. Set
// ACLSEG_ACCEPTANCE_DIR to keep the run directories.

#include <sys/resource.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "aclseg/cli/commands.hpp"
#include "aclseg/gradient_suite.hpp"
#include "aclseg/losses/losses.hpp"
#include "aclseg/metrics/metrics.hpp"
#include "aclseg/numerics/init.hpp"
#include "aclseg/numerics/runtime.hpp"
#include "../test_util.hpp"

using namespace aclseg;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kGradBudgetSeconds = 120.0;
constexpr double kMetricTol = 1e-9;
constexpr double kLossTol = 1e-9;
constexpr double kOrthogonalTol = 1e-12;
constexpr double kTrendBudgetMinutes = 60.0;
constexpr double kFtBaseMax = 0.3;
constexpr double kAclBaseMin = 0.9;
constexpr double kNewSlack = 0.02;
constexpr double kFinalDiceGap = 0.3;
constexpr double kOrderFloor = 0.85;
constexpr double kOrderSpread = 0.1;
constexpr double kIdealEasyMin = 0.85;
constexpr double kIdealBand = 0.05;
constexpr double kAblationGap = 0.1;

constexpr std::uint64_t kDataSeed = 7;
constexpr std::size_t kSeeds = 3;

struct Verdict {
    bool pass;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Verdict& v) {
    std::printf("%s [%d] %s: %s\n", v.pass ? "PASS" : "FAIL", id, name.c_str(), v.detail.c_str());
    std::fflush(stdout);
    if (!v.pass) ++failures;
}

void guarded(int id, const std::string& name, const std::function<Verdict()>& check) {
    try {
        report(id, name, check());
    } catch (const std::exception& e) {
        report(id, name, {false, std::string("error: ") + e.what()});
    }
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

double cpu_seconds() {
    rusage u{};
    getrusage(RUSAGE_SELF, &u);
    return static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
           1e-6 * static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec);
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// ---------------------------------------------------------------------------
// Criteria 1-3: exact oracles

Verdict gradient_suite() {
    const auto start = std::chrono::steady_clock::now();
    const auto results = run_gradient_suite();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    double worst = 0;
    std::string failing;
    for (const auto& r : results) {
        worst = std::max(worst, r.max_error);
        if (!r.passed) failing += " " + r.op;
    }
    const bool ok = failing.empty() && secs < kGradBudgetSeconds;
    return {ok, fmt("%zu ops, worst relative error %.2e (limit %.0e), %.2f s (limit %.0f s)%s", results.size(), worst,
                    kGradTolerance, secs, kGradBudgetSeconds, failing.empty() ? "" : ("; failing:" + failing).c_str())};
}

metrics::AccuracyMatrix matrix_of(std::vector<int> classes, std::vector<std::vector<double>> rows) {
    metrics::AccuracyMatrix m(std::move(classes));
    for (auto& r : rows) m.append_row(std::move(r));
    return m;
}

metrics::IdealScores ideal_of(std::array<double, 5> v) {
    metrics::IdealScores s;
    s.per_class = v;
    return s;
}

Verdict metric_oracles() {
    std::string bad;
    // Hand-computed examples; unused entries are filled with arbitrary valid values.
    const double base = metrics::omega_base(matrix_of({1, 2, 3}, {{0.7}, {0.4, 0.5}, {0.2, 0.5, 0.5}}),
                                            ideal_of({0.8, 0.9, 0.9, 0.9, 0.9}));
    if (!near(base, 0.375, kMetricTol)) bad += fmt(" omega_base=%.12f", base);
    const double fresh = metrics::omega_new(matrix_of({1, 2, 3}, {{0.7}, {0.3, 0.45}, {0.3, 0.3, 0.6}}),
                                            ideal_of({0.8, 0.9, 0.6, 0.9, 0.9}));
    if (!near(fresh, 0.75, kMetricTol)) bad += fmt(" omega_new=%.12f", fresh);
    const double all = metrics::omega_all(matrix_of({1, 2}, {{0.8}, {0.4, 0.6}}), ideal_of({0.8, 0.6, 0.9, 0.9, 0.9}));
    if (!near(all, 0.5 / 0.7, kMetricTol)) bad += fmt(" omega_all=%.12f", all);

    // Fixed point and ratio homogeneity on random matrices and schedules.
    num::Rng rng(20240601);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::size_t checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> order{1, 2, 3, 4, 5};
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t steps = 2 + static_cast<std::size_t>(rng() % 4);
        order.resize(steps);
        metrics::IdealScores ideal;
        for (auto& v : ideal.per_class) v = 0.05 + 0.95 * u01(rng);
        metrics::AccuracyMatrix exact(order), random(order), scaled(order);
        const double c = 0.1 + 0.9 * u01(rng);
        metrics::IdealScores ideal_scaled = ideal;
        for (auto& v : ideal_scaled.per_class) v *= c;
        for (std::size_t i = 1; i <= steps; ++i) {
            std::vector<double> e, r, s;
            for (std::size_t j = 1; j <= i; ++j) {
                e.push_back(ideal.of(order[j - 1]));
                r.push_back(u01(rng));
                s.push_back(r.back() * c);
            }
            exact.append_row(e);
            random.append_row(r);
            scaled.append_row(s);
        }
        const auto one = metrics::omega_scores(exact, ideal);
        const auto a = metrics::omega_scores(random, ideal), b = metrics::omega_scores(scaled, ideal_scaled);
        const bool fixed = near(one.omega_base, 1, kMetricTol) && near(one.omega_new, 1, kMetricTol) &&
                           near(one.omega_all, 1, kMetricTol);
        const bool homogeneous = near(a.omega_base, b.omega_base, kMetricTol) &&
                                 near(a.omega_new, b.omega_new, kMetricTol) && near(a.omega_all, b.omega_all, kMetricTol);
        if (!fixed) bad += fmt(" fixed-point trial %d", trial);
        if (!homogeneous) bad += fmt(" homogeneity trial %d", trial);
        ++checked;
    }
    return {bad.empty(), fmt("3 hand-computed examples and %zu random matrices within %.0e%s", checked, kMetricTol,
                             bad.empty() ? "" : ("; mismatches:" + bad).c_str())};
}

Verdict loss_oracles() {
    using T = num::Tensor<double>;
    const double bce = losses::bce_loss(T({1, 1, 1, 1}, std::vector<double>{0.0}), T({1, 1, 1, 1}, std::vector<double>{1.0})).item();
    const std::size_t k = 6;
    const double ce = losses::adv_loss_discriminator(T({2, k}, std::vector<double>(2 * k, 0.3)), std::vector<int>{0, 4}).item();
    // Shared and private features live on different samples, so every shared
    // column is orthogonal to every private column.
    const double orth =
        losses::diff_loss(T({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 0.0}), T({2, 2}, std::vector<double>{0.0, 0.0, 0.0, 1.0}))
            .item();
    const auto x = num::random_normal<double>({2, 1, 4, 4}, 9);
    const double same = losses::lwf_distill(x, x).item();
    const bool ok = near(bce, std::log(2.0), kLossTol) && near(ce, std::log(static_cast<double>(k)), kLossTol) &&
                    std::abs(orth) <= kOrthogonalTol && same == 0.0;
    return {ok, fmt("BCE(0,1)-ln2=%.1e, uniform CE-ln%zu=%.1e, orthogonal diff=%.1e, identical distill=%.1e", bce - std::log(2.0),
                    k, ce - std::log(static_cast<double>(k)), orth, same)};
}

// ---------------------------------------------------------------------------
// Training-based criteria

struct Lab {
    fs::path root;
    fs::path data;
    double train_cpu = 0;  // CPU seconds spent in the criterion-5 runs

    cli::ExperimentConfig experiment(const std::string& method, const fs::path& out, std::uint64_t seed) const {
        cli::ExperimentConfig e;
        e.data = data;
        e.method = method;
        e.out = out;
        e.train.seed = seed;
        e.train.deterministic = true;
        return e;
    }

    cli::SeedResult train(cli::ExperimentConfig e, const std::string& what, double* cpu_sink = nullptr) {
        const double c0 = cpu_seconds();
        const auto t0 = std::chrono::steady_clock::now();
        auto res = cli::run_train(std::move(e), true, nullptr);
        const double cpu = cpu_seconds() - c0;
        if (cpu_sink) *cpu_sink += cpu;
        std::printf("  trained %-28s %7.1f s\n", what.c_str(),
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        std::fflush(stdout);
        return std::move(res.front());
    }
};

struct MethodScores {
    std::vector<metrics::OmegaScores> runs;

    double mean(double metrics::OmegaScores::*f) const { return report::aggregate(runs, f).mean; }
};

std::string describe(const char* name, const MethodScores& s) {
    using S = metrics::OmegaScores;
    return fmt("%s base %.3f new %.3f all %.3f dice %.3f", name, s.mean(&S::omega_base), s.mean(&S::omega_new),
               s.mean(&S::omega_all), s.mean(&S::overall_dice));
}

Verdict ideal_reference(const metrics::IdealScores& ideal) {
    std::string detail, bad;
    double easy_min = 1, hard = ideal.of(5);
    for (int c = 1; c <= data::kNumClasses; ++c) {
        detail += fmt("%s%s %.3f", c > 1 ? ", " : "", data::task_spec(c).name.c_str(), ideal.of(c));
        if (c != 5) easy_min = std::min(easy_min, ideal.of(c));
    }
    if (easy_min < kIdealEasyMin) bad += fmt("; an easy class is below %.2f", kIdealEasyMin);
    if (!(hard < easy_min)) bad += "; oesophagus is not strictly the lowest";
    const fs::path ref_path = ACLSEG_IDEAL_REFERENCE;
    if (!fs::exists(ref_path)) {
        bad += "; regression reference " + ref_path.string() + " is missing";
    } else {
        const auto ref = metrics::IdealScores::from_json(report::read_json(ref_path));
        for (int c = 1; c <= data::kNumClasses; ++c)
            if (!near(ideal.of(c), ref.of(c), kIdealBand))
                bad += fmt("; %s drifted from reference %.3f", data::task_spec(c).name.c_str(), ref.of(c));
    }
    return {bad.empty(), detail + (bad.empty() ? fmt(" (within %.2f of the stored reference)", kIdealBand) : bad)};
}

Verdict freezing(const fs::path& run) {
    const auto last = model::read_checkpoint(run / "checkpoints" / "task_5");
    std::size_t compared = 0;
    std::string bad;
    for (std::size_t k = 0; k < 4; ++k) {
        const auto at_k = model::read_checkpoint(run / "checkpoints" / ("task_" + std::to_string(k + 1)));
        for (const auto& [name, t] : at_k.tensors) {
            const bool own = name.rfind("private." + std::to_string(k) + ".", 0) == 0 ||
                             name.rfind("head." + std::to_string(k) + ".", 0) == 0;
            if (!own) continue;
            ++compared;
            if (t.values != last.tensors.at(name).values) bad += " " + name;
        }
    }
    if (compared == 0) return {false, "no private or head tensors found in the checkpoints"};
    return {bad.empty(), fmt("%zu private/head tensors of tasks 1-4 compared bitwise against end of task 5%s", compared,
                             bad.empty() ? "" : ("; changed:" + bad).c_str())};
}

}  // namespace

int main() {
    num::tune_allocator();
    std::printf("acceptance: criteria 1-3 are exact oracles; 4-9 train on the synthetic benchmark\n");
    std::fflush(stdout);
    guarded(1, "gradient suite", gradient_suite);
    guarded(2, "metric oracles", metric_oracles);
    guarded(3, "loss oracles", loss_oracles);

    Lab lab;
    std::optional<testutil::TempDir> scratch;
    if (const char* keep = std::getenv("ACLSEG_ACCEPTANCE_DIR")) {
        lab.root = keep;
    } else {
        scratch.emplace();
        lab.root = scratch->path();
    }
    lab.data = lab.root / "benchmark";
    try {
        cli::DatagenOptions gen;
        gen.seed = kDataSeed;
        gen.out = lab.data;
        gen.force = true;
        cli::run_datagen(gen);
    } catch (const std::exception& e) {
        std::printf("FAIL [4-9] benchmark generation: %s\n", e.what());
        return 1;
    }

    // Ideal references: the multi-head U-Net for FT and LwF, ACLSeg trained
    // on all classes at once for ACLSeg and its variants.
    std::optional<metrics::IdealScores> unet_ideal, acl_ideal;
    const fs::path unet_ideal_path = lab.root / "joint_unet" / "ideal_scores.json";
    const fs::path acl_ideal_path = lab.root / "joint_aclseg" / "ideal_scores.json";
    try {
        unet_ideal = lab.train(lab.experiment("joint", lab.root / "joint_unet", 0), "joint unet", &lab.train_cpu).joint->ideal;
        auto e = lab.experiment("joint", lab.root / "joint_aclseg", 0);
        e.arch = "aclseg";
        acl_ideal = lab.train(e, "joint aclseg", &lab.train_cpu).joint->ideal;
    } catch (const std::exception& e) {
        std::printf("  joint training failed: %s\n", e.what());
    }

    // Criterion 5 runs: three seeds of every method on OrderA.
    MethodScores ft, lwf, acl;
    std::vector<fs::path> acl_dirs;
    bool trend_runs_ok = unet_ideal && acl_ideal;
    for (std::uint64_t seed = 0; trend_runs_ok && seed < kSeeds; ++seed) {
        try {
            for (auto [name, sink] : {std::pair{"ft", &ft}, std::pair{"lwf", &lwf}}) {
                auto e = lab.experiment(name, lab.root / fmt("%s_A_%llu", name, static_cast<unsigned long long>(seed)), seed);
                e.ideal = unet_ideal_path;
                sink->runs.push_back(*lab.train(e, fmt("%s OrderA seed %llu", name, static_cast<unsigned long long>(seed)),
                                                &lab.train_cpu)
                                          .record->omega);
            }
            auto e = lab.experiment("aclseg", lab.root / fmt("aclseg_A_%llu", static_cast<unsigned long long>(seed)), seed);
            e.ideal = acl_ideal_path;
            acl.runs.push_back(*lab.train(e, fmt("aclseg OrderA seed %llu", static_cast<unsigned long long>(seed)),
                                          &lab.train_cpu)
                                    .record->omega);
            acl_dirs.push_back(e.out);
        } catch (const std::exception& e) {
            std::printf("  training failed: %s\n", e.what());
            trend_runs_ok = false;
        }
    }

    guarded(4, "freezing invariant", [&]() -> Verdict {
        if (acl_dirs.empty()) return {false, "no finished ACLSeg OrderA run"};
        return freezing(acl_dirs.front());
    });

    guarded(5, "trend reproduction", [&]() -> Verdict {
        if (!trend_runs_ok) return {false, "not every OrderA run finished"};
        using S = metrics::OmegaScores;
        std::string bad;
        const double minutes = lab.train_cpu / 60.0;
        if (minutes > kTrendBudgetMinutes) bad += fmt("; CPU %.1f min over the %.0f min budget", minutes, kTrendBudgetMinutes);
        if (!(ft.mean(&S::omega_base) <= kFtBaseMax)) bad += "; (a) FT base retention too high";
        if (!(acl.mean(&S::omega_base) >= kAclBaseMin)) bad += "; (b) ACLSeg base retention too low";
        if (!(acl.mean(&S::omega_new) >= lwf.mean(&S::omega_new) - kNewSlack)) bad += "; (c) ACLSeg new-class score below LwF";
        if (!(ft.mean(&S::omega_all) < lwf.mean(&S::omega_all))) bad += "; (d) FT omega_all not below LwF";
        if (!(lwf.mean(&S::omega_all) <= acl.mean(&S::omega_all))) bad += "; (d) LwF omega_all above ACLSeg";
        if (!(acl.mean(&S::overall_dice) >= ft.mean(&S::overall_dice) + kFinalDiceGap)) bad += "; (e) final Dice gap too small";
        return {bad.empty(), fmt("means over %zu seeds: ", kSeeds) + describe("FT", ft) + " | " + describe("LwF", lwf) + " | " +
                                 describe("ACLSeg", acl) + fmt(" | %.1f min CPU incl. joint training", minutes) + bad};
    });

    guarded(6, "task-order robustness", [&]() -> Verdict {
        if (acl.runs.size() != kSeeds) return {false, "OrderA ACLSeg runs missing"};
        using S = metrics::OmegaScores;
        const double a = acl.mean(&S::omega_all);
        std::string detail = fmt("OrderA %.3f", a), bad;
        for (const char* order : {"B", "C"}) {
            MethodScores s;
            for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
                auto e = lab.experiment("aclseg", lab.root / fmt("aclseg_%s_%llu", order, static_cast<unsigned long long>(seed)),
                                        seed);
                e.order = order;
                e.ideal = acl_ideal_path;
                s.runs.push_back(*lab.train(e, fmt("aclseg Order%s seed %llu", order, static_cast<unsigned long long>(seed)))
                                      .record->omega);
            }
            const double v = s.mean(&S::omega_all);
            detail += fmt(", Order%s %.3f", order, v);
            if (v < kOrderFloor) bad += fmt("; Order%s below %.2f", order, kOrderFloor);
            if (std::abs(v - a) > kOrderSpread) bad += fmt("; Order%s more than %.2f from OrderA", order, kOrderSpread);
        }
        return {bad.empty(), "ACLSeg omega_all " + detail + bad};
    });

    guarded(7, "ideal reference", [&]() -> Verdict {
        if (!unet_ideal) return {false, "joint training did not finish"};
        return ideal_reference(*unet_ideal);
    });

    guarded(8, "determinism", [&]() -> Verdict {
        if (acl_dirs.empty()) return {false, "no finished ACLSeg OrderA run"};
        auto e = lab.experiment("aclseg", lab.root / "aclseg_A_0_repeat", 0);
        e.ideal = acl_ideal_path;
        lab.train(e, "aclseg OrderA seed 0 again");
        std::string bad;
        for (const char* f : {"matrix.csv", "omega.json"})
            if (slurp(acl_dirs.front() / f) != slurp(e.out / f) || slurp(e.out / f).empty()) bad += std::string(" ") + f;
        return {bad.empty(), bad.empty() ? "two deterministic seed-0 OrderA runs wrote byte-identical matrix.csv and omega.json"
                                         : "differing files:" + bad};
    });

    guarded(9, "ablation direction", [&]() -> Verdict {
        if (acl.runs.size() != kSeeds) return {false, "OrderA ACLSeg runs missing"};
        using S = metrics::OmegaScores;
        MethodScores basic;
        for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
            auto e = lab.experiment("aclseg", lab.root / fmt("basic_enc_A_%llu", static_cast<unsigned long long>(seed)), seed);
            e.variant = "basic_enc";
            e.ideal = acl_ideal_path;
            basic.runs.push_back(
                *lab.train(e, fmt("basic_enc OrderA seed %llu", static_cast<unsigned long long>(seed))).record->omega);
        }
        const double full = acl.mean(&S::omega_all), base = basic.mean(&S::omega_all);
        return {full - base >= kAblationGap,
                fmt("omega_all basic_enc %.3f vs full %.3f (gap %.3f, required %.2f)", base, full, full - base, kAblationGap)};
    });

    std::printf("acceptance: %d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
