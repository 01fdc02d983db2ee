#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/errors.hpp"
#include "aclseg/numerics/ops.hpp"

namespace aclseg::losses {

using num::Tensor;

struct LossWeights {
    double lambda1 = 1.0;   // task
    double lambda2 = 0.05;  // adversarial
    double lambda3 = 0.3;   // difference

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("loss weights must be nonnegative");
    }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
    w.lambda3 = j.value("lambda3", w.lambda3);
}

/// Two-term binary cross-entropy on logits, averaged over every pixel:
/// mean(softplus(l) − y·l), which equals −[y·log σ(l) + (1−y)·log(1−σ(l))].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
    num::detail::require_same_shape(logits.shape(), target.shape(), "bce_loss");
    for (T v : target.data())
        if (v != T(0) && v != T(1)) throw ContractError("bce_loss: target values must be 0 or 1");
    return num::mean(num::sub(num::softplus(logits), num::mul(target.detach(), logits)));
}

namespace detail {

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
    Tensor<T> out({labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
            throw ContractError("label " + std::to_string(labels[i]) + " out of range for " +
                                std::to_string(classes) + " discriminator outputs");
        }
        out.data()[i * classes + static_cast<std::size_t>(labels[i])] = T(1);
    }
    return out;
}

}  // namespace detail

/// Mean cross-entropy −log softmax(d)[label]. Label 0 marks noise rows.
template <typename T>
Tensor<T> adv_loss_discriminator(const Tensor<T>& d_logits, std::span<const int> labels) {
    num::detail::require_rank(d_logits.shape(), 2, "adv_loss_discriminator");
    if (labels.size() != d_logits.dim(0)) {
        throw ShapeError("adv_loss_discriminator: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(d_logits.dim(0)) + " rows");
    }
    const auto onehot = detail::one_hot<T>(labels, d_logits.dim(1));
    return num::scale(num::sum(num::mul(num::log_softmax(d_logits), onehot)),
                      T(-1) / static_cast<T>(labels.size()));
}

/// Shared-module side of the min-max game: the negated discriminator
/// cross-entropy on real rows. The caller evaluates the discriminator with
/// detached parameters so only the shared encoder receives gradients.
template <typename T>
Tensor<T> adv_loss_shared(const Tensor<T>& d_logits_on_real, std::span<const int> labels) {
    return num::scale(adv_loss_discriminator(d_logits_on_real, labels), T(-1));
}

/// ‖z_sᵀ z_p‖²_F / N². Zero iff every shared column is orthogonal to every
/// private column over the batch.
template <typename T>
Tensor<T> diff_loss(const Tensor<T>& zs, const Tensor<T>& zp) {
    num::detail::require_same_shape(zs.shape(), zp.shape(), "diff_loss");
    num::detail::require_rank(zs.shape(), 2, "diff_loss");
    const auto cross = num::matmul(num::transpose(zs), zp);
    const T n = static_cast<T>(zs.dim(0));
    return num::scale(num::sum(num::mul(cross, cross)), T(1) / (n * n));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& task, const Tensor<T>& adv_shared, const Tensor<T>& diff, const LossWeights& w) {
    return num::add(num::add(num::scale(task, static_cast<T>(w.lambda1)), num::scale(adv_shared, static_cast<T>(w.lambda2))),
                    num::scale(diff, static_cast<T>(w.lambda3)));
}

/// Mean squared difference between the current logits and the frozen
/// snapshot's logits; no gradient flows into `old_logits`.
template <typename T>
Tensor<T> lwf_distill(const Tensor<T>& old_logits, const Tensor<T>& new_logits) {
    num::detail::require_same_shape(old_logits.shape(), new_logits.shape(), "lwf_distill");
    const auto d = num::sub(new_logits, old_logits.detach());
    return num::mean(num::mul(d, d));
}

}  // namespace aclseg::losses
