#pragma once

#include <optional>
#include <vector>

#include "aclseg/data/benchmark.hpp"
#include "aclseg/metrics/metrics.hpp"
#include "aclseg/trainer/engine.hpp"

namespace aclseg::baselines {

struct JointResult {
    metrics::IdealScores ideal;
    trainer::PhaseSummary summary;
    std::vector<nlohmann::json> epochs;
};

/// Trains all five classes at once (batches of the classes interleaved) and
/// records each class's test Dice as its ideal. `learner` must have no tasks
/// yet. Running means in the written JSON follow `schedule`.
inline JointResult train_joint(trainer::Learner& learner, const data::Dataset& ds, const trainer::TrainConfig& cfg,
                               const nlohmann::json& config_echo,
                               const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                               const trainer::TaskSchedule& schedule = trainer::TaskSchedule::preset("A"),
                               const trainer::EpochCallback& on_epoch = {}) {
    if (learner.task_count() != 0) throw ContractError("joint training needs a learner without tasks");
    schedule.validate();
    std::vector<trainer::TaskRef> tasks;
    for (int c = 1; c <= data::kNumClasses; ++c) {
        learner.add_task();
        tasks.push_back({static_cast<std::size_t>(c - 1), c});
    }
    JointResult res;
    if (out_dir) {
        std::error_code ec;
        std::filesystem::create_directories(*out_dir, ec);
        if (ec) throw IoError("cannot create run directory " + out_dir->string() + ": " + ec.message());
        metrics::write_text(*out_dir / "config.json", trainer::dump_json(config_echo));
        metrics::write_text(*out_dir / "epochs.jsonl", "");
    }
    const auto log_epoch = [&](const nlohmann::json& e) {
        res.epochs.push_back(e);
        if (out_dir) trainer::detail::append_line(*out_dir / "epochs.jsonl", e.dump());
        if (on_epoch) on_epoch(e);
    };
    res.summary = trainer::train_phase(learner, tasks, ds, cfg, 0, log_epoch);
    const auto dice = trainer::evaluate_dice(learner, tasks, ds);
    for (std::size_t i = 0; i < dice.size(); ++i) res.ideal.per_class[i] = dice[i];
    if (out_dir) {
        learner.save(*out_dir / "checkpoints" / "joint");
        auto j = res.ideal.to_json(schedule.order);
        j["method"] = learner.method();
        metrics::write_text(*out_dir / "ideal_scores.json", trainer::dump_json(j));
    }
    return res;
}

}  // namespace aclseg::baselines
