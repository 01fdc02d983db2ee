#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/data/benchmark.hpp"
#include "aclseg/errors.hpp"
#include "aclseg/losses/losses.hpp"

namespace aclseg::trainer {

struct TrainConfig {
    double lr0 = 1e-3;
    double plateau_factor = 3.0;
    std::size_t plateau_patience = 5;
    double min_lr = 1e-5;
    std::size_t early_stop_patience = 10;
    std::size_t batch_size = 2;
    std::size_t max_epochs = 60;
    losses::LossWeights weights{};
    double lwf_mu = 1.0;
    std::uint64_t seed = 0;
    bool deterministic = false;

    void validate() const {
        if (!(lr0 > 0)) throw ConfigError("lr0 must be > 0");
        if (!(plateau_factor > 1)) throw ConfigError("plateau_factor must be > 1");
        if (plateau_patience < 1 || early_stop_patience < 1) throw ConfigError("patience values must be >= 1");
        if (min_lr < 0 || min_lr > lr0) throw ConfigError("min_lr must lie in [0, lr0]");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (lwf_mu < 0) throw ConfigError("lwf_mu must be >= 0");
        weights.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json w;
        losses::to_json(w, weights);
        return {{"lr0", lr0},
                {"plateau_factor", plateau_factor},
                {"plateau_patience", plateau_patience},
                {"min_lr", min_lr},
                {"early_stop_patience", early_stop_patience},
                {"batch_size", batch_size},
                {"max_epochs", max_epochs},
                {"weights", w},
                {"lwf_mu", lwf_mu},
                {"seed", seed},
                {"deterministic", deterministic}};
    }

    /// Overlays the keys present in `j`; unknown keys are rejected.
    void merge_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("training config must be a JSON object");
        static const std::set<std::string> known{"lr0",        "plateau_factor", "plateau_patience", "min_lr",
                                                 "early_stop_patience", "batch_size", "max_epochs", "weights",
                                                 "lwf_mu",     "seed",           "deterministic"};
        for (const auto& [key, value] : j.items())
            if (!known.count(key)) throw ConfigError("unknown training config key '" + key + "'");
        try {
            lr0 = j.value("lr0", lr0);
            plateau_factor = j.value("plateau_factor", plateau_factor);
            plateau_patience = j.value("plateau_patience", plateau_patience);
            min_lr = j.value("min_lr", min_lr);
            early_stop_patience = j.value("early_stop_patience", early_stop_patience);
            batch_size = j.value("batch_size", batch_size);
            max_epochs = j.value("max_epochs", max_epochs);
            lwf_mu = j.value("lwf_mu", lwf_mu);
            seed = j.value("seed", seed);
            deterministic = j.value("deterministic", deterministic);
            if (j.contains("weights")) {
                for (const auto& [key, value] : j.at("weights").items())
                    if (key != "lambda1" && key != "lambda2" && key != "lambda3")
                        throw ConfigError("unknown loss weight '" + key + "'");
                losses::from_json(j.at("weights"), weights);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad training config value: ") + e.what());
        }
    }
};

/// Order in which the five classes are learned.
struct TaskSchedule {
    std::string name;
    std::vector<int> order;

    static TaskSchedule preset(const std::string& which) {
        if (which == "A" || which == "OrderA") return {"OrderA", {1, 2, 3, 4, 5}};
        if (which == "B" || which == "OrderB") return {"OrderB", {5, 4, 3, 2, 1}};
        if (which == "C" || which == "OrderC") return {"OrderC", {3, 2, 1, 4, 5}};
        throw ConfigError("unknown schedule preset '" + which + "' (expected A, B or C)");
    }

    /// A preset letter or a comma-separated permutation of 1..5.
    static TaskSchedule parse(const std::string& text) {
        if (text.find(',') == std::string::npos) return preset(text);
        TaskSchedule s{"custom", {}};
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                std::size_t used = 0;
                s.order.push_back(std::stoi(item, &used));
                if (used != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw ConfigError("bad class id '" + item + "' in schedule '" + text + "'");
            }
        }
        s.validate();
        return s;
    }

    void validate() const {
        if (order.size() != static_cast<std::size_t>(data::kNumClasses)) {
            throw ConfigError("schedule must list all " + std::to_string(data::kNumClasses) + " classes");
        }
        std::set<int> seen;
        for (int c : order) {
            if (c < 1 || c > data::kNumClasses) throw ConfigError("class id " + std::to_string(c) + " out of range");
            if (!seen.insert(c).second) throw ConfigError("class id " + std::to_string(c) + " repeated in schedule");
        }
    }

    std::size_t size() const { return order.size(); }

    nlohmann::json to_json() const {
        std::vector<std::string> names;
        for (int c : order) names.push_back(data::task_spec(c).name);
        return {{"name", name}, {"order", order}, {"classes", names}};
    }
};

}  // namespace aclseg::trainer
