#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aclseg/data/dataset.hpp"
#include "aclseg/losses/losses.hpp"
#include "aclseg/metrics/metrics.hpp"
#include "aclseg/model/layers.hpp"
#include "aclseg/numerics/init.hpp"
#include "aclseg/numerics/runtime.hpp"
#include "aclseg/trainer/config.hpp"
#include "aclseg/trainer/optim.hpp"

namespace aclseg::trainer {

using num::Tensor;
namespace fs = std::filesystem;

/// Named loss terms of one training step, in a fixed order.
using StepLog = std::vector<std::pair<std::string, double>>;

/// A task being trained: index among the learner's tasks and its class id.
struct TaskRef {
    std::size_t index;
    int class_id;
};

/// Training strategy shared by every method. Task indices are 0-based in
/// learning order.
class Learner {
public:
    virtual ~Learner() = default;

    virtual std::string method() const = 0;
    virtual std::size_t task_count() const = 0;

    /// Adds the modules for the next task.
    virtual void add_task() = 0;

    /// Called once before the epochs of a training phase.
    virtual void begin_phase(const std::vector<TaskRef>& tasks, const data::Dataset& ds, const TrainConfig& cfg) = 0;

    virtual StepLog train_batch(const TaskRef& task, const data::Batch<float>& batch, double lr) = 0;

    /// Logits of each listed task's head, computed without gradients.
    virtual std::vector<Tensor<float>> predict(const Tensor<float>& images, const std::vector<std::size_t>& tasks) const = 0;

    virtual void end_task(std::size_t /*task*/) {}

    /// Every parameter whose value training can change.
    virtual model::ParameterList<float> parameters() const = 0;

    virtual void save(const fs::path& dir) const = 0;
};

namespace detail {

inline void require_finite(double v, const std::string& term, const std::string& where) {
    if (!std::isfinite(v)) throw TrainingAborted("non-finite " + term + " loss (" + std::to_string(v) + ") " + where);
}

inline void append_line(const fs::path& path, const std::string& line) {
    std::ofstream os(path, std::ios::app | std::ios::binary);
    if (!os) throw IoError("cannot append to " + path.string());
    os << line << '\n';
}

}  // namespace detail

/// Mean per-pixel task BCE of every listed head on the validation split.
inline double validation_bce(const Learner& learner, const std::vector<TaskRef>& tasks, const data::Dataset& ds,
                             std::size_t batch_size) {
    num::NoGradGuard guard;
    double total = 0;
    for (const auto& t : tasks) {
        double sum = 0;
        std::size_t count = 0;
        for (const auto& b : data::batches<float>(ds, data::Split::val(t.class_id), batch_size)) {
            const auto logits = learner.predict(b.images, {t.index}).at(0);
            sum += losses::bce_loss(logits, b.masks).item() * static_cast<double>(logits.numel());
            count += logits.numel();
        }
        if (count == 0) throw ContractError("validation split is empty");
        total += sum / static_cast<double>(count);
    }
    return total / static_cast<double>(tasks.size());
}

/// Test Dice of each listed task, averaged over test images.
inline std::vector<double> evaluate_dice(const Learner& learner, const std::vector<TaskRef>& tasks,
                                         const data::Dataset& ds, std::size_t batch_size = 16) {
    num::NoGradGuard guard;
    num::FlushDenormalsGuard ftz;
    const auto& idx = ds.manifest.test;
    if (idx.empty()) throw ContractError("test split is empty");
    std::vector<std::size_t> heads;
    for (const auto& t : tasks) heads.push_back(t.index);
    std::vector<double> sums(tasks.size(), 0.0);
    const std::size_t px = ds.pixels();
    for (std::size_t begin = 0; begin < idx.size(); begin += batch_size) {
        const std::size_t n = std::min(batch_size, idx.size() - begin);
        const auto chunk = std::span<const std::size_t>(idx).subspan(begin, n);
        const auto batch = data::make_batch<float>(ds, chunk, tasks.front().class_id);
        const auto logits = learner.predict(batch.images, heads);
        for (std::size_t t = 0; t < tasks.size(); ++t)
            for (std::size_t i = 0; i < n; ++i) {
                const auto pred = logits[t].data().subspan(i * px, px);
                sums[t] += metrics::dice(pred, ds.mask(chunk[i], tasks[t].class_id));
            }
    }
    for (auto& s : sums) s /= static_cast<double>(idx.size());
    return sums;
}

struct PhaseSummary {
    std::size_t epochs = 0;
    std::size_t best_epoch = 0;
    double best_val = 0;
    bool stopped_early = false;
};

using EpochCallback = std::function<void(const nlohmann::json&)>;

/// Trains the listed tasks together (batches interleaved round-robin) with
/// plateau LR decay and early stopping on validation BCE; the best epoch's
/// parameters are restored at the end.
inline PhaseSummary train_phase(Learner& learner, const std::vector<TaskRef>& tasks, const data::Dataset& ds,
                                const TrainConfig& cfg, std::uint64_t phase_tag, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    num::FlushDenormalsGuard ftz;
    learner.begin_phase(tasks, ds, cfg);
    PlateauScheduler plateau(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    EarlyStopping stopper(cfg.early_stop_patience);
    const auto params = learner.parameters();
    auto best = model::snapshot_values(params);
    PhaseSummary summary;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = plateau.lr();
        std::vector<data::BatchPlan<float>> plans;
        std::size_t rounds = 0;
        for (const auto& t : tasks) {
            const auto seed = num::derive_seed(cfg.seed, "shuffle", phase_tag * 100003 + epoch * 31 + t.index);
            plans.push_back(data::batches<float>(ds, data::Split::train(t.class_id), cfg.batch_size, seed));
            rounds = std::max(rounds, plans.back().size());
        }
        StepLog sums;
        std::size_t steps = 0;
        for (std::size_t r = 0; r < rounds; ++r)
            for (std::size_t i = 0; i < tasks.size(); ++i) {
                if (r >= plans[i].size()) continue;
                const auto log = learner.train_batch(tasks[i], plans[i][r], lr);
                if (sums.empty()) sums = log;
                else
                    for (std::size_t j = 0; j < log.size(); ++j) sums[j].second += log[j].second;
                ++steps;
            }
        const double val = validation_bce(learner, tasks, ds, 16);
        detail::require_finite(val, "validation bce", "at epoch " + std::to_string(epoch));
        const bool improved = stopper.observe(val, epoch);
        if (improved) best = model::snapshot_values(params);
        plateau.observe(val);

        nlohmann::json train = nlohmann::json::object();
        for (const auto& [name, v] : sums) train[name] = v / static_cast<double>(std::max<std::size_t>(steps, 1));
        nlohmann::json rec{{"epoch", epoch}, {"lr", lr}, {"train", train}, {"val_bce", val}, {"improved", improved}};
        if (!cfg.deterministic) {
            rec["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        if (on_epoch) on_epoch(rec);
        summary.epochs = epoch;
        if (stopper.should_stop()) {
            summary.stopped_early = true;
            break;
        }
    }
    model::restore_values(params, best);
    summary.best_epoch = stopper.best_epoch();
    summary.best_val = stopper.best();
    return summary;
}

/// Everything a sequential run produces.
struct RunRecord {
    std::string method;
    TaskSchedule schedule;
    nlohmann::json config;
    std::vector<nlohmann::json> epochs;
    metrics::AccuracyMatrix matrix;
    std::optional<metrics::OmegaScores> omega;
    double wall_clock_seconds = 0;
};

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

/// Learns the scheduled classes one at a time. After each task the learner
/// is checkpointed and evaluated on the test split, appending one row to the
/// accuracy matrix. With `out_dir`, the record is written as it grows.
inline RunRecord run_sequence(Learner& learner, const TaskSchedule& schedule, const data::Dataset& ds,
                              const TrainConfig& cfg, const nlohmann::json& config_echo,
                              const std::optional<fs::path>& out_dir = std::nullopt,
                              const std::optional<metrics::IdealScores>& ideal = std::nullopt,
                              const EpochCallback& on_epoch = {}) {
    schedule.validate();
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    RunRecord rec{learner.method(), schedule, config_echo, {}, metrics::AccuracyMatrix(schedule.order), {}, 0};
    if (out_dir) {
        std::error_code ec;
        fs::create_directories(*out_dir, ec);
        if (ec) throw IoError("cannot create run directory " + out_dir->string() + ": " + ec.message());
        metrics::write_text(*out_dir / "config.json", dump_json(config_echo));
        metrics::write_text(*out_dir / "schedule.json", dump_json(schedule.to_json()));
        metrics::write_text(*out_dir / "epochs.jsonl", "");
    }
    std::vector<TaskRef> learned;
    for (std::size_t k = 0; k < schedule.size(); ++k) {
        const TaskRef task{k, schedule.order[k]};
        learner.add_task();
        const auto log_epoch = [&](const nlohmann::json& e) {
            nlohmann::json line{{"task", k + 1}, {"class", task.class_id}};
            line.update(e);
            rec.epochs.push_back(line);
            if (out_dir) detail::append_line(*out_dir / "epochs.jsonl", line.dump());
            if (on_epoch) on_epoch(line);
        };
        train_phase(learner, {task}, ds, cfg, k + 1, log_epoch);
        learner.end_task(k);
        learned.push_back(task);
        rec.matrix.append_row(evaluate_dice(learner, learned, ds));
        if (out_dir) {
            learner.save(*out_dir / "checkpoints" / ("task_" + std::to_string(k + 1)));
            metrics::write_matrix_csv(*out_dir / "matrix.csv", rec.matrix);
        }
    }
    rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ideal) rec.omega = metrics::omega_scores(rec.matrix, *ideal);
    if (out_dir) {
        if (rec.omega) {
            auto j = metrics::to_json(*rec.omega);
            j["method"] = rec.method;
            j["schedule"] = schedule.order;
            j["config"] = config_echo;
            metrics::write_text(*out_dir / "omega.json", dump_json(j));
        }
        if (!cfg.deterministic) {
            metrics::write_text(*out_dir / "timing.json", dump_json({{"wall_clock_seconds", rec.wall_clock_seconds}}));
        }
    }
    return rec;
}

}  // namespace aclseg::trainer
