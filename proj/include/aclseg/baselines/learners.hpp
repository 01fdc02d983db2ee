#pragma once

#include <map>
#include <string>
#include <vector>

#include "aclseg/baselines/unet.hpp"
#include "aclseg/losses/losses.hpp"
#include "aclseg/model/checkpoint.hpp"
#include "aclseg/trainer/engine.hpp"

namespace aclseg::baselines {

using trainer::StepLog;
using trainer::TaskRef;
namespace fs = std::filesystem;

enum class UNetMethod { ft, lwf, joint };

inline std::string to_string(UNetMethod m) {
    switch (m) {
        case UNetMethod::ft: return "ft";
        case UNetMethod::lwf: return "lwf";
        case UNetMethod::joint: return "joint";
    }
    return "?";
}

template <typename T>
void save_unet(const MultiHeadUNet<T>& net, const fs::path& dir, const std::string& method) {
    nlohmann::json meta{{"kind", "unet"}, {"method", method}, {"config", net.config().to_json()},
                        {"head_count", net.head_count()}};
    model::save_checkpoint(dir, std::move(meta), net.parameters());
}

template <typename T>
MultiHeadUNet<T> load_unet(const fs::path& dir) {
    const auto ckpt = model::read_checkpoint(dir);
    if (ckpt.meta.value("kind", "") != "unet") throw CorruptionError("not a U-Net checkpoint: " + dir.string());
    MultiHeadUNet<T> net(UNetConfig::from_json(ckpt.meta.at("config")));
    const auto heads = ckpt.meta.at("head_count").get<std::size_t>();
    for (std::size_t k = 0; k < heads; ++k) net.add_head();
    model::assign_parameters(ckpt, net.parameters());
    return net;
}

/// Multi-head U-Net trained by fine-tuning, by learning without forgetting,
/// or jointly. Every method updates the trunk and the current head; LwF adds
/// μ·Σ_{j<k} MSE between the old heads' logits and those of the network as
/// it was when task k began.
class UNetLearner : public trainer::Learner {
public:
    UNetLearner(UNetConfig cfg, UNetMethod method) : net_(cfg), method_(method) {}
    UNetLearner(MultiHeadUNet<float> net, UNetMethod method) : net_(std::move(net)), method_(method) {}

    std::string method() const override { return to_string(method_); }
    std::size_t task_count() const override { return net_.head_count(); }
    const MultiHeadUNet<float>& net() const { return net_; }

    void add_task() override { net_.add_head(); }

    void begin_phase(const std::vector<TaskRef>& tasks, const data::Dataset& ds, const trainer::TrainConfig& cfg) override {
        opt_ = trainer::Adam<float>();
        mu_ = cfg.lwf_mu;
        snapshot_.clear();
        if (method_ != UNetMethod::lwf) return;
        if (tasks.size() != 1) throw ContractError("lwf trains one task per phase");
        const std::size_t k = tasks.front().index;
        if (k == 0) return;
        std::vector<std::size_t> old(k);
        for (std::size_t j = 0; j < k; ++j) old[j] = j;
        for (const auto& b : data::batches<float>(ds, data::Split::train(tasks.front().class_id), 16)) {
            const auto logits = predict(b.images, old);
            const std::size_t px = ds.pixels();
            for (std::size_t i = 0; i < b.indices.size(); ++i) {
                auto& entry = snapshot_[b.indices[i]];
                for (const auto& l : logits) {
                    const auto row = l.data().subspan(i * px, px);
                    entry.insert(entry.end(), row.begin(), row.end());
                }
            }
        }
    }

    /// Old-head logits recorded at the start of the phase, per head.
    std::vector<Tensor<float>> snapshot_logits(const data::Batch<float>& batch, std::size_t heads) const {
        const std::size_t n = batch.indices.size();
        const std::size_t px = batch.masks.numel() / n;
        std::vector<Tensor<float>> out;
        for (std::size_t j = 0; j < heads; ++j) {
            std::vector<float> v;
            v.reserve(n * px);
            for (auto idx : batch.indices) {
                const auto it = snapshot_.find(idx);
                if (it == snapshot_.end()) throw ContractError("no lwf snapshot for sample " + std::to_string(idx));
                v.insert(v.end(), it->second.begin() + static_cast<std::ptrdiff_t>(j * px),
                         it->second.begin() + static_cast<std::ptrdiff_t>((j + 1) * px));
            }
            out.emplace_back(batch.masks.shape(), std::move(v));
        }
        return out;
    }

    /// The training objective on one batch, without updating anything.
    std::pair<Tensor<float>, StepLog> objective(const TaskRef& task, const data::Batch<float>& batch) const {
        const auto feats = net_.trunk(batch.images);
        const auto bce = losses::bce_loss(net_.head(task.index, feats), batch.masks);
        if (method_ != UNetMethod::lwf || task.index == 0) return {bce, {{"total", bce.item()}, {"bce", bce.item()}}};
        const auto old = snapshot_logits(batch, task.index);
        Tensor<float> distill;
        for (std::size_t j = 0; j < task.index; ++j) {
            const auto d = losses::lwf_distill(old[j], net_.head(j, feats));
            distill = j == 0 ? d : num::add(distill, d);
        }
        const auto total = num::add(bce, num::scale(distill, static_cast<float>(mu_)));
        return {total, {{"total", total.item()}, {"bce", bce.item()}, {"distill", distill.item()}}};
    }

    StepLog train_batch(const TaskRef& task, const data::Batch<float>& batch, double lr) override {
        auto [loss, log] = objective(task, batch);
        const std::string where = "in task " + std::to_string(task.index + 1);
        for (const auto& [name, v] : log) trainer::detail::require_finite(v, name, where);
        const auto params = net_.parameters();
        model::zero_grads(params);
        num::backward(loss);
        opt_.step(params, lr);
        return log;
    }

    std::vector<Tensor<float>> predict(const Tensor<float>& images, const std::vector<std::size_t>& tasks) const override {
        num::NoGradGuard guard;
        const auto feats = net_.trunk(images);
        std::vector<Tensor<float>> out;
        for (auto k : tasks) out.push_back(net_.head(k, feats));
        return out;
    }

    model::ParameterList<float> parameters() const override { return net_.parameters(); }

    void save(const fs::path& dir) const override { save_unet(net_, dir, method()); }

private:
    MultiHeadUNet<float> net_;
    UNetMethod method_;
    trainer::Adam<float> opt_;
    double mu_ = 1.0;
    std::map<std::size_t, std::vector<float>> snapshot_;
};

}  // namespace aclseg::baselines
