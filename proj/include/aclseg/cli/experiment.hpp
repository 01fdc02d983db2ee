#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "aclseg/errors.hpp"
#include "aclseg/model/aclseg_model.hpp"
#include "aclseg/trainer/config.hpp"

namespace aclseg::cli {

namespace fs = std::filesystem;

/// Everything `train` needs. A JSON config file holds the experiment keys
/// below plus any training-config keys, all at top level; command-line flags
/// override file values, which override defaults.
struct ExperimentConfig {
    fs::path data;
    std::string method = "aclseg";
    std::string order = "A";
    std::string variant = "full";
    std::string arch = "unet";  // joint training only
    fs::path out;
    std::size_t repeats = 1;
    std::optional<fs::path> ideal;
    trainer::TrainConfig train;

    static bool is_sequential(const std::string& m) { return m == "aclseg" || m == "ft" || m == "lwf"; }

    void merge_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
        nlohmann::json rest = nlohmann::json::object();
        try {
            for (const auto& [key, value] : j.items()) {
                if (key == "data") data = value.get<std::string>();
                else if (key == "method") method = value.get<std::string>();
                else if (key == "order") order = value.is_array() ? join(value.get<std::vector<int>>()) : value.get<std::string>();
                else if (key == "variant") variant = value.get<std::string>();
                else if (key == "arch") arch = value.get<std::string>();
                else if (key == "out") out = value.get<std::string>();
                else if (key == "repeats") repeats = value.get<std::size_t>();
                else if (key == "ideal") ideal = fs::path(value.get<std::string>());
                else rest[key] = value;
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad experiment config value: ") + e.what());
        }
        train.merge_json(rest);
    }

    void load_file(const fs::path& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot read config file " + path.string());
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("malformed config file " + path.string() + ": " + e.what());
        }
        merge_json(j);
    }

    trainer::TaskSchedule schedule() const { return trainer::TaskSchedule::parse(order); }

    void validate() const {
        if (!is_sequential(method) && method != "joint") {
            throw ConfigError("unknown method '" + method + "' (expected aclseg, ft, lwf or joint)");
        }
        if (arch != "unet" && arch != "aclseg") throw ConfigError("unknown arch '" + arch + "' (expected unet or aclseg)");
        if (repeats < 1) throw ConfigError("repeats must be >= 1");
        if (data.empty()) throw ConfigError("no dataset given (--data)");
        if (out.empty()) throw ConfigError("no output directory given (--out)");
        model::variant_from_string(variant);
        schedule();
        train.validate();
    }

    nlohmann::json to_json() const {
        auto j = train.to_json();
        j["data"] = data.string();
        j["method"] = method;
        j["order"] = schedule().order;
        j["variant"] = variant;
        j["arch"] = arch;
        j["repeats"] = repeats;
        if (ideal) j["ideal"] = ideal->string();
        return j;
    }

private:
    static std::string join(const std::vector<int>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    }
};

}  // namespace aclseg::cli
