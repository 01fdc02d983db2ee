#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "aclseg/numerics/init.hpp"
#include "aclseg/numerics/ops.hpp"

namespace aclseg::num {

/// Relative error between two gradient vectors: ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor).
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares reverse-mode gradients of `fn` against central finite differences.
///
/// The scalar probed is sum(fn(inputs) ⊙ R) with a fixed random R, so the
/// check exercises arbitrary upstream gradients rather than all-ones. Returns
/// the worst relative error over all inputs that require gradients.
inline double check_gradients(const GradFn& fn, std::vector<Tensor<double>> inputs, std::uint64_t seed,
                              double h = 1e-5) {
    Tensor<double> probe_out;
    {
        NoGradGuard guard;
        probe_out = fn(inputs);
    }
    const Tensor<double> weights = random_normal<double>(probe_out.shape(), derive_seed(seed, "gradcheck.r"));
    auto objective = [&](const std::vector<Tensor<double>>& in) { return sum(mul(fn(in), weights)); };

    for (auto& t : inputs) t.zero_grad();
    backward(objective(inputs));

    double worst = 0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        std::vector<double> numeric(t.numel());
        NoGradGuard guard;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + h;
            const double up = objective(inputs).item();
            t.data()[i] = saved - h;
            const double down = objective(inputs).item();
            t.data()[i] = saved;
            numeric[i] = (up - down) / (2 * h);
        }
        worst = std::max(worst, relative_error(analytic, numeric));
    }
    return worst;
}

}  // namespace aclseg::num
