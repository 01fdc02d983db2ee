#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/baselines/joint.hpp"
#include "aclseg/baselines/learners.hpp"
#include "aclseg/cli/experiment.hpp"
#include "aclseg/data/benchmark.hpp"
#include "aclseg/data/dataset.hpp"
#include "aclseg/errors.hpp"
#include "aclseg/metrics/metrics.hpp"
#include "aclseg/model/checkpoint.hpp"
#include "aclseg/report/report.hpp"
#include "aclseg/trainer/aclseg_learner.hpp"
#include "aclseg/trainer/engine.hpp"

namespace aclseg::cli {

/// Raised when a command would overwrite existing output without --force.
struct Refusal : Error {
    using Error::Error;
};

/// Process exit codes shared by every subcommand.
enum ExitCode : int { kOk = 0, kFailure = 1, kInvalid = 2, kMissing = 3 };

inline bool env_deterministic() {
    const char* v = std::getenv("ACLSEG_DETERMINISTIC");
    return v && std::string(v) == "1";
}

inline bool is_nonempty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

inline bool contains_path(const fs::path& outer, const fs::path& inner) {
    const auto o = fs::weakly_canonical(outer), i = fs::weakly_canonical(inner);
    auto it = i.begin();
    for (const auto& part : o) {
        if (it == i.end() || *it != part) return false;
        ++it;
    }
    return true;
}

/// Clears `out` for a fresh command run, or refuses when it already holds
/// files and `force` is unset. Never touches a directory holding `input`.
inline void prepare_output(const fs::path& out, bool force, const std::optional<fs::path>& input = std::nullopt) {
    if (input && contains_path(out, *input)) {
        throw ConfigError("output directory " + out.string() + " contains the input " + input->string());
    }
    if (fs::exists(out) && !fs::is_directory(out)) throw Refusal(out.string() + " exists and is not a directory");
    if (is_nonempty_dir(out)) {
        if (!force) throw Refusal(out.string() + " already exists and is not empty; pass --force to overwrite");
        fs::remove_all(out);
    }
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// datagen

struct DatagenOptions {
    std::uint64_t seed = 0;
    fs::path out;
    data::BenchmarkCounts counts;
    std::size_t height = 128, width = 128;
    bool force = false;
};

/// Parses "HxW".
inline std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
    const auto x = text.find('x');
    try {
        if (x == std::string::npos) throw std::invalid_argument(text);
        std::size_t a = 0, b = 0;
        const auto h = std::stoul(text.substr(0, x), &a), w = std::stoul(text.substr(x + 1), &b);
        if (a != x || b != text.size() - x - 1) throw std::invalid_argument(text);
        return {h, w};
    } catch (const std::exception&) {
        throw ConfigError("bad image size '" + text + "' (expected HxW, e.g. 128x128)");
    }
}

inline data::DatasetManifest run_datagen(const DatagenOptions& o) {
    data::validate_geometry(o.height, o.width);
    if (o.out.empty()) throw ConfigError("no output directory given (--out)");
    prepare_output(o.out, o.force);
    return data::generate_benchmark(o.seed, o.counts, o.height, o.width, o.out);
}

// ---------------------------------------------------------------------------
// train

inline data::Dataset open_dataset(const fs::path& dir) {
    const fs::path manifest = fs::is_directory(dir) ? dir / "manifest.json" : dir;
    if (!fs::exists(manifest)) {
        throw MissingPrerequisite("no dataset at " + dir.string() + "; create one with `aclseg datagen`");
    }
    return data::load_dataset(manifest);
}

inline model::ModelConfig aclseg_model_config(const data::Dataset& ds, const std::string& variant, std::uint64_t seed) {
    model::ModelConfig m;
    m.height = ds.manifest.height;
    m.width = ds.manifest.width;
    m.latent_dim = m.grid_h() * m.grid_w();
    m.variant = model::variant_from_string(variant);
    m.seed = seed;
    m.validate();
    return m;
}

inline baselines::UNetConfig unet_config(const data::Dataset& ds, std::uint64_t seed) {
    baselines::UNetConfig u;
    u.height = ds.manifest.height;
    u.width = ds.manifest.width;
    u.seed = seed;
    u.validate();
    return u;
}

inline std::unique_ptr<trainer::Learner> make_learner(const ExperimentConfig& e, const data::Dataset& ds,
                                                      std::uint64_t seed) {
    if (e.method == "aclseg") return std::make_unique<trainer::ACLSegLearner>(aclseg_model_config(ds, e.variant, seed));
    if (e.method == "ft") return std::make_unique<baselines::UNetLearner>(unet_config(ds, seed), baselines::UNetMethod::ft);
    if (e.method == "lwf") return std::make_unique<baselines::UNetLearner>(unet_config(ds, seed), baselines::UNetMethod::lwf);
    if (e.arch == "aclseg") {
        return std::make_unique<trainer::ACLSegLearner>(aclseg_model_config(ds, e.variant, seed), false);
    }
    return std::make_unique<baselines::UNetLearner>(unet_config(ds, seed), baselines::UNetMethod::joint);
}

/// Outcome of one seed of `train`.
struct SeedResult {
    std::uint64_t seed = 0;
    fs::path dir;
    std::optional<trainer::RunRecord> record;      // sequential methods
    std::optional<baselines::JointResult> joint;  // joint training
};

inline std::string short_epoch_line(const std::string& tag, const nlohmann::json& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %3d  lr %.2e  val_bce %.5f%s", e.value("epoch", 0), e.value("lr", 0.0),
                  e.value("val_bce", 0.0), e.value("improved", false) ? "  *" : "");
    std::string prefix = tag;
    if (e.contains("class")) {
        prefix += " task " + std::to_string(e.value("task", 0)) + " (" + data::task_spec(e.value("class", 1)).name + ")";
    }
    return prefix + "  " + buf;
}

/// Runs `train` for every seed; the first seed is `e.train.seed`, the rest
/// follow consecutively. Returns the per-seed outcomes.
inline std::vector<SeedResult> run_train(ExperimentConfig e, bool force, std::ostream* progress = &std::cerr) {
    if (env_deterministic()) e.train.deterministic = true;
    e.validate();
    const auto ds = open_dataset(e.data);
    std::optional<metrics::IdealScores> ideal;
    if (e.ideal) {
        if (!fs::exists(*e.ideal)) throw MissingPrerequisite("ideal reference " + e.ideal->string() + " does not exist");
        ideal = metrics::IdealScores::from_json(report::read_json(*e.ideal));
    }
    prepare_output(e.out, force, e.data);
    const auto schedule = e.schedule();
    std::vector<SeedResult> results;
    for (std::size_t r = 0; r < e.repeats; ++r) {
        ExperimentConfig run = e;
        run.train.seed = e.train.seed + r;
        SeedResult res{run.train.seed, e.repeats == 1 ? e.out : e.out / ("seed_" + std::to_string(run.train.seed)), {}, {}};
        const std::string tag = "[" + e.method + " seed " + std::to_string(res.seed) + "]";
        const auto on_epoch = [&](const nlohmann::json& line) {
            if (progress) *progress << short_epoch_line(tag, line) << std::endl;
        };
        auto learner = make_learner(run, ds, run.train.seed);
        auto echo = run.to_json();
        echo["method"] = learner->method();
        if (e.method == "joint") {
            res.joint = baselines::train_joint(*learner, ds, run.train, echo, res.dir, schedule, on_epoch);
        } else {
            res.record = trainer::run_sequence(*learner, schedule, ds, run.train, echo, res.dir, ideal, on_epoch);
        }
        results.push_back(std::move(res));
    }
    if (e.repeats > 1) {
        nlohmann::json agg{{"method", e.method}, {"seeds", nlohmann::json::array()}};
        for (const auto& r : results) agg["seeds"].push_back(r.seed);
        if (e.method == "joint") {
            metrics::IdealScores mean;
            nlohmann::json per_class = nlohmann::json::object();
            for (int c = 1; c <= data::kNumClasses; ++c) {
                std::vector<double> v;
                for (const auto& r : results) v.push_back(r.joint->ideal.of(c));
                const auto ms = metrics::mean_std(v);
                mean.per_class[static_cast<std::size_t>(c - 1)] = ms.mean;
                per_class[data::task_spec(c).name] = {{"mean", ms.mean}, {"std", ms.std}};
            }
            agg["per_class"] = per_class;
            auto ideal_j = mean.to_json(schedule.order);
            ideal_j["method"] = e.arch == "aclseg" ? "aclseg_joint" : "joint";
            ideal_j["seeds"] = agg["seeds"];
            metrics::write_text(e.out / "ideal_scores.json", trainer::dump_json(ideal_j));
        } else {
            std::vector<double> overall;
            for (const auto& r : results) overall.push_back(metrics::overall_dice(r.record->matrix.rows.back()));
            const auto ms = metrics::mean_std(overall);
            agg["overall_dice"] = {{"mean", ms.mean}, {"std", ms.std}};
            if (ideal) {
                std::vector<metrics::OmegaScores> scores;
                for (const auto& r : results) scores.push_back(*r.record->omega);
                using S = metrics::OmegaScores;
                const std::pair<const char*, double S::*> fields[] = {
                    {"omega_base", &S::omega_base}, {"omega_new", &S::omega_new}, {"omega_all", &S::omega_all}};
                for (const auto& [name, f] : fields) {
                    const auto m = report::aggregate(scores, f);
                    agg[name] = {{"mean", m.mean}, {"std", m.std}};
                }
            }
        }
        metrics::write_text(e.out / "aggregate.json", trainer::dump_json(agg));
    }
    return results;
}

// ---------------------------------------------------------------------------
// eval

/// Rebuilds a learner from a checkpoint directory of either kind.
inline std::unique_ptr<trainer::Learner> load_learner(const fs::path& ckpt) {
    const auto meta = report::read_json(ckpt / "manifest.json");
    const auto kind = meta.value("kind", std::string{});
    if (kind == "aclseg") return std::make_unique<trainer::ACLSegLearner>(model::load_model<float>(ckpt), true);
    if (kind == "unet") {
        return std::make_unique<baselines::UNetLearner>(baselines::load_unet<float>(ckpt), baselines::UNetMethod::ft);
    }
    throw CorruptionError("unknown checkpoint kind '" + kind + "' in " + ckpt.string());
}

/// Latest checkpoint of a run: the joint one, or the highest task_k.
inline fs::path final_checkpoint(const fs::path& run) {
    const fs::path root = run / "checkpoints";
    if (fs::exists(root / "joint" / "manifest.json")) return root / "joint";
    std::optional<std::pair<int, fs::path>> best;
    if (fs::is_directory(root))
        for (const auto& e : fs::directory_iterator(root)) {
            const auto name = e.path().filename().string();
            if (name.rfind("task_", 0) != 0 || !fs::exists(e.path() / "manifest.json")) continue;
            const int k = std::atoi(name.c_str() + 5);
            if (!best || k > best->first) best = {k, e.path()};
        }
    if (!best) throw MissingPrerequisite("no checkpoint under " + root.string() + "; run `aclseg train` first");
    return best->second;
}

/// Test Dice of every head in the run's final checkpoint, keyed by class name.
/// The head-to-class mapping comes from the run's schedule.
inline nlohmann::json run_eval(const fs::path& run, const fs::path& data_dir) {
    const auto ds = open_dataset(data_dir);
    const auto ckpt = final_checkpoint(run);
    auto learner = load_learner(ckpt);
    std::vector<int> classes;
    if (ckpt.filename() == "joint") {
        for (int c = 1; c <= data::kNumClasses; ++c) classes.push_back(c);
    } else {
        classes = report::read_json(run / "schedule.json").at("order").get<std::vector<int>>();
    }
    if (learner->task_count() > classes.size()) throw CorruptionError("checkpoint has more heads than scheduled classes");
    classes.resize(learner->task_count());
    std::vector<trainer::TaskRef> tasks;
    for (std::size_t k = 0; k < classes.size(); ++k) tasks.push_back({k, classes[k]});
    const auto dice = trainer::evaluate_dice(*learner, tasks, ds);
    nlohmann::json per_class = nlohmann::json::object();
    for (std::size_t k = 0; k < classes.size(); ++k) per_class[data::task_spec(classes[k]).name] = dice[k];
    return {{"checkpoint", ckpt.string()}, {"per_class", per_class}, {"overall_dice", metrics::overall_dice(dice)}};
}

// ---------------------------------------------------------------------------
// report

struct ReportOutput {
    std::vector<report::RunData> runs;
    std::string table_csv;
    std::string svg;
};

inline ReportOutput run_report(const std::vector<fs::path>& run_paths, const std::vector<std::string>& ideal_specs,
                               const fs::path& out, bool force) {
    if (run_paths.empty()) throw ConfigError("no runs given (--runs)");
    report::IdealBook ideals;
    for (const auto& spec : ideal_specs) ideals.add(spec);
    ReportOutput r;
    r.runs = report::discover_runs(run_paths);
    const auto groups = report::group_runs(r.runs, ideals);
    r.table_csv = report::omega_table_csv(groups);
    r.svg = report::dice_curves_svg(groups);
    for (const auto& p : run_paths)
        if (contains_path(out, p)) throw ConfigError("report output " + out.string() + " would contain input " + p.string());
    if (fs::exists(out / "omega_table.csv") && !force) {
        throw Refusal((out / "omega_table.csv").string() + " already exists; pass --force to overwrite");
    }
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    metrics::write_text(out / "omega_table.csv", r.table_csv);
    metrics::write_text(out / "dice_curves.svg", r.svg);
    return r;
}

}  // namespace aclseg::cli
