#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/data/blob.hpp"
#include "aclseg/errors.hpp"
#include "aclseg/model/aclseg_model.hpp"
#include "aclseg/model/layers.hpp"

namespace aclseg::model {

// Checkpoint directory: manifest.json (caller metadata plus a name → offset,
// shape table) and params.bin, a little-endian f32 blob.

struct StoredTensor {
    Shape shape;
    std::vector<float> values;
};

struct CheckpointContents {
    nlohmann::json meta;
    std::map<std::string, StoredTensor> tensors;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, nlohmann::json meta, const ParameterList<T>& params) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    nlohmann::json table = nlohmann::json::array();
    std::vector<unsigned char> blob;
    std::size_t offset = 0;
    for (const auto& p : params) {
        table.push_back({{"name", p.name}, {"offset", offset}, {"shape", p.tensor.shape()}});
        for (T v : p.tensor.data()) data::detail::put_f32(blob, static_cast<float>(v));
        offset += p.tensor.numel();
    }
    meta["params"] = table;
    meta["blob"] = "params.bin";
    meta["dtype"] = "f32";
    meta["count"] = offset;
    data::write_file(dir / "params.bin", blob);
    const std::string text = meta.dump(2) + "\n";
    data::write_file(dir / "manifest.json",
                     std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

inline CheckpointContents read_checkpoint(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("missing checkpoint manifest in " + dir.string());
    CheckpointContents out;
    try {
        is >> out.meta;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
    }
    const auto blob = data::read_file(dir / "params.bin");
    const std::size_t count = out.meta.at("count").get<std::size_t>();
    if (blob.size() != count * 4) throw CorruptionError("checkpoint blob size mismatch in " + dir.string());
    for (const auto& entry : out.meta.at("params")) {
        StoredTensor t;
        t.shape = entry.at("shape").get<Shape>();
        const std::size_t off = entry.at("offset").get<std::size_t>();
        const std::size_t n = num::shape_numel(t.shape);
        if (off + n > count) throw CorruptionError("checkpoint entry out of range: " + entry.at("name").get<std::string>());
        t.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) t.values[i] = data::detail::get_f32(blob.data() + 4 * (off + i));
        out.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

/// Assigns stored values to every parameter by name; every parameter must be
/// present with a matching shape.
template <typename T>
void assign_parameters(const CheckpointContents& ckpt, const ParameterList<T>& params) {
    for (const auto& p : params) {
        const auto it = ckpt.tensors.find(p.name);
        if (it == ckpt.tensors.end()) throw CorruptionError("checkpoint lacks parameter " + p.name);
        if (it->second.shape != p.tensor.shape()) {
            throw ShapeError("checkpoint shape " + num::shape_str(it->second.shape) + " for " + p.name +
                             " does not match model " + num::shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor;
        for (std::size_t i = 0; i < dst.numel(); ++i) dst.data()[i] = static_cast<T>(it->second.values[i]);
    }
}

template <typename T>
void save_model(const ACLSegModel<T>& model, const std::filesystem::path& dir) {
    nlohmann::json meta{{"kind", "aclseg"},
                        {"config", model.config().to_json()},
                        {"task_count", model.task_count()},
                        {"frozen_through", model.frozen_through()}};
    save_checkpoint(dir, std::move(meta), model.parameters());
}

template <typename T>
ACLSegModel<T> load_model(const std::filesystem::path& dir) {
    const auto ckpt = read_checkpoint(dir);
    if (ckpt.meta.value("kind", "") != "aclseg") throw CorruptionError("not an ACLSeg checkpoint: " + dir.string());
    ACLSegModel<T> model(ModelConfig::from_json(ckpt.meta.at("config")));
    const auto tasks = ckpt.meta.at("task_count").get<std::size_t>();
    for (std::size_t k = 0; k < tasks; ++k) model.add_task(false);
    const int frozen = ckpt.meta.at("frozen_through").get<int>();
    for (int k = 0; k <= frozen; ++k) model.freeze(static_cast<std::size_t>(k));
    assign_parameters(ckpt, model.parameters());
    return model;
}

}  // namespace aclseg::model
