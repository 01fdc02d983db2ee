#pragma once

#include <string>
#include <vector>

#include "aclseg/losses/losses.hpp"
#include "aclseg/model/aclseg_model.hpp"
#include "aclseg/model/checkpoint.hpp"
#include "aclseg/numerics/init.hpp"
#include "aclseg/trainer/engine.hpp"

namespace aclseg::trainer {

/// Fraction of rows whose arg-max logit equals the label.
inline double argmax_accuracy(const Tensor<float>& logits, std::span<const int> labels) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    const auto v = logits.data();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (v[i * c + j] > v[i * c + best]) best = j;
        hits += static_cast<int>(best) == labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

/// Adversarial continual learner. Each batch runs one discriminator step
/// (real shared latents of task k against N(0,1) noise labeled 0) followed
/// by one main step on shared, private k and head k.
///
/// In sequential mode a task's private module and head are frozen when it
/// ends; in joint mode every task stays trainable.
class ACLSegLearner : public Learner {
public:
    ACLSegLearner(model::ModelConfig cfg, bool sequential = true) : model_(std::move(cfg)), sequential_(sequential) {}
    ACLSegLearner(model::ACLSegModel<float> model, bool sequential) : model_(std::move(model)), sequential_(sequential) {}

    std::string method() const override { return sequential_ ? "aclseg" : "aclseg_joint"; }
    std::size_t task_count() const override { return model_.task_count(); }
    const model::ACLSegModel<float>& model() const { return model_; }
    model::ACLSegModel<float>& model() { return model_; }

    void add_task() override { model_.add_task(sequential_); }

    void begin_phase(const std::vector<TaskRef>&, const data::Dataset&, const TrainConfig& cfg) override {
        main_opt_ = Adam<float>();
        disc_opt_ = Adam<float>();
        weights_ = cfg.weights;
        seed_ = cfg.seed;
    }

    /// Discriminator update on detached shared latents against N(0,1) noise.
    /// Returns the loss and the arg-max accuracy over real and noise rows.
    std::pair<double, double> discriminator_step(std::size_t k, const Tensor<float>& zs, double lr) {
        const std::size_t n = zs.dim(0);
        std::vector<int> labels(n, static_cast<int>(k) + 1);
        labels.resize(2 * n, 0);
        const auto params = model_.discriminator_parameters();
        const auto noise = num::random_normal<float>(zs.shape(), num::derive_seed(seed_, "noise", step_));
        const auto logits = model_.forward_discriminator(num::concat<float>({zs.detach(), noise}, 0));
        const auto loss = losses::adv_loss_discriminator(logits, labels);
        detail::require_finite(loss.item(), "discriminator", where(k));
        model::zero_grads(params);
        num::backward(loss);
        disc_opt_.step(params, lr);
        return {loss.item(), argmax_accuracy(logits, labels)};
    }

    /// Update of shared, private k and head k on the weighted objective; the
    /// discriminator enters with detached parameters.
    StepLog main_step(std::size_t k, const data::Batch<float>& batch, const Tensor<float>& zs, double lr) {
        const std::vector<int> real(zs.dim(0), static_cast<int>(k) + 1);
        const auto params = model_.task_parameters(k);
        const auto zp = model_.forward_private(k, batch.images);
        const auto bce = losses::bce_loss(model_.forward_head(k, model_.fuse(zs, zp)), batch.masks);
        const auto adv = losses::adv_loss_shared(model_.forward_discriminator(zs, true), real);
        const auto diff = losses::diff_loss(zs, zp);
        const auto total = losses::total_loss(bce, adv, diff, weights_);
        StepLog log{{"total", total.item()}, {"bce", bce.item()}, {"adv_shared", adv.item()}, {"diff", diff.item()}};
        for (const auto& [name, v] : log) detail::require_finite(v, name, where(k));
        model::zero_grads(params);
        num::backward(total);
        main_opt_.step(params, lr);
        return log;
    }

    StepLog train_batch(const TaskRef& task, const data::Batch<float>& batch, double lr) override {
        const auto zs = model_.forward_shared(batch.images);
        const auto [d_loss, d_acc] = discriminator_step(task.index, zs, lr);
        auto log = main_step(task.index, batch, zs, lr);
        ++step_;
        log.emplace_back("adv_disc", d_loss);
        log.emplace_back("disc_acc", d_acc);
        return log;
    }

    std::vector<Tensor<float>> predict(const Tensor<float>& images, const std::vector<std::size_t>& tasks) const override {
        num::NoGradGuard guard;
        const auto zs = model_.forward_shared(images);
        std::vector<Tensor<float>> out;
        for (auto k : tasks) out.push_back(model_.forward_head(k, model_.fuse(zs, model_.forward_private(k, images))));
        return out;
    }

    void end_task(std::size_t k) override {
        if (sequential_) model_.freeze(k);
        main_opt_.drop_frozen(model_.parameters());
    }

    model::ParameterList<float> parameters() const override { return model_.parameters(); }

    void save(const fs::path& dir) const override { model::save_model(model_, dir); }

private:
    std::string where(std::size_t k) const {
        return "in task " + std::to_string(k + 1) + " step " + std::to_string(step_);
    }

    model::ACLSegModel<float> model_;
    bool sequential_;
    Adam<float> main_opt_, disc_opt_;
    losses::LossWeights weights_{};
    std::uint64_t seed_ = 0;
    std::uint64_t step_ = 0;
};

}  // namespace aclseg::trainer
