#pragma once

#include <cmath>
#include <limits>
#include <unordered_map>
#include <vector>

#include "aclseg/errors.hpp"
#include "aclseg/model/layers.hpp"

namespace aclseg::trainer {

/// Adam with bias correction. Moments are kept per parameter tensor; only
/// parameters that require gradients and received one in the last backward
/// pass are updated.
template <typename T>
class Adam {
public:
    struct Slot {
        std::vector<double> m, v;
        std::size_t t = 0;
    };

    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const model::ParameterList<T>& params, double lr) {
        for (const auto& p : params) {
            const auto* key = p.tensor.node_ptr().get();
            if (!p.tensor.requires_grad()) {
                state_.erase(key);
                continue;
            }
            if (!p.tensor.has_grad()) continue;
            auto& s = state_[key];
            const std::size_t n = p.tensor.numel();
            if (s.m.empty()) {
                s.m.assign(n, 0.0);
                s.v.assign(n, 0.0);
            } else if (s.m.size() != n) {
                throw ShapeError("adam: state for " + p.name + " has " + std::to_string(s.m.size()) +
                                 " entries, parameter has " + std::to_string(n));
            }
            ++s.t;
            const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
            const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
            auto t = p.tensor;
            auto w = t.data();
            const auto g = p.tensor.grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = static_cast<double>(g[i]);
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
                w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    /// Forgets moments of parameters that no longer require gradients.
    void drop_frozen(const model::ParameterList<T>& params) {
        for (const auto& p : params)
            if (!p.tensor.requires_grad()) state_.erase(p.tensor.node_ptr().get());
    }

    const Slot* slot(const num::Tensor<T>& t) const {
        const auto it = state_.find(t.node_ptr().get());
        return it == state_.end() ? nullptr : &it->second;
    }

    std::size_t tracked() const { return state_.size(); }

private:
    double beta1_, beta2_, eps_;
    std::unordered_map<const void*, Slot> state_;
};

/// Divides the learning rate by `factor` after `patience` epochs without a
/// strict improvement of the monitored value.
class PlateauScheduler {
public:
    PlateauScheduler(double lr0, double factor, std::size_t patience, double min_lr)
        : lr_(lr0), factor_(factor), patience_(patience), min_lr_(min_lr) {}

    double lr() const { return lr_; }

    /// Returns the learning rate for the next epoch.
    double observe(double value) {
        if (value < best_) {
            best_ = value;
            wait_ = 0;
        } else if (++wait_ >= patience_) {
            lr_ = std::max(lr_ / factor_, min_lr_);
            wait_ = 0;
        }
        return lr_;
    }

private:
    double lr_, factor_;
    std::size_t patience_;
    double min_lr_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t wait_ = 0;
};

class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// True when `value` is a new best.
    bool observe(double value, std::size_t epoch) {
        if (value < best_) {
            best_ = value;
            best_epoch_ = epoch;
            wait_ = 0;
            return true;
        }
        ++wait_;
        return false;
    }

    bool should_stop() const { return wait_ >= patience_; }
    double best() const { return best_; }
    std::size_t best_epoch() const { return best_epoch_; }

private:
    std::size_t patience_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t best_epoch_ = 0;
    std::size_t wait_ = 0;
};

}  // namespace aclseg::trainer
