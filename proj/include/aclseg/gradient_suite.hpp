#pragma once

#include <chrono>
#include <set>
#include <string>
#include <vector>

#include "aclseg/errors.hpp"
#include "aclseg/losses/losses.hpp"
#include "aclseg/numerics/gradcheck.hpp"

namespace aclseg {

/// One finite-difference case: a function of f64 inputs and a seed-driven
/// input factory.
struct GradCase {
    std::string op;
    std::function<std::pair<num::GradFn, std::vector<num::Tensor<double>>>(std::uint64_t)> make;
};

struct GradResult {
    std::string op;
    double max_error = 0;
    bool passed = false;
};

inline constexpr double kGradTolerance = 1e-4;

namespace detail {

inline num::Tensor<double> param(const num::Shape& s, std::uint64_t seed) {
    auto t = num::random_normal<double>(s, seed);
    t.set_requires_grad(true);
    return t;
}

inline num::Tensor<double> binary_target(const num::Shape& s, std::uint64_t seed) {
    auto t = num::random_normal<double>(s, seed);
    for (auto& v : t.data()) v = v > 0 ? 1.0 : 0.0;
    return t;
}

}  // namespace detail

/// Every differentiable op and every loss, on small random inputs.
inline std::vector<GradCase> gradient_cases() {
    using num::Shape;
    using num::Tensor;
    using detail::param;
    using In = std::vector<Tensor<double>>;
    using Made = std::pair<num::GradFn, In>;
    std::vector<GradCase> c;
    const auto binary = [&](const char* name, auto op) {
        c.push_back({name, [op](std::uint64_t s) -> Made {
                         return {[op](const In& in) { return op(in[0], in[1]); },
                                 {param({2, 3, 2}, s), param({2, 3, 2}, s + 1)}};
                     }});
    };
    const auto unary = [&](const char* name, auto op, Shape shape = {3, 4}) {
        c.push_back({name, [op, shape](std::uint64_t s) -> Made {
                         return {[op](const In& in) { return op(in[0]); }, {param(shape, s)}};
                     }});
    };
    binary("add", [](const auto& a, const auto& b) { return num::add(a, b); });
    binary("sub", [](const auto& a, const auto& b) { return num::sub(a, b); });
    binary("mul", [](const auto& a, const auto& b) { return num::mul(a, b); });
    unary("scale", [](const auto& a) { return num::scale(a, 1.7); });
    unary("add_scalar", [](const auto& a) { return num::add_scalar(a, -0.4); });
    c.push_back({"add_bias", [](std::uint64_t s) -> Made {
                     return {[](const In& in) { return num::add_bias(in[0], in[1]); },
                             {param({2, 3, 2, 2}, s), param({3}, s + 1)}};
                 }});
    c.push_back({"matmul", [](std::uint64_t s) -> Made {
                     return {[](const In& in) { return num::matmul(in[0], in[1]); }, {param({3, 4}, s), param({4, 2}, s + 1)}};
                 }});
    unary("transpose", [](const auto& a) { return num::transpose(a); });
    unary("reshape", [](const auto& a) { return num::reshape(a, Shape{2, 6}); });
    unary("flatten", [](const auto& a) { return num::flatten(a); }, {2, 1, 2, 3});
    c.push_back({"concat", [](std::uint64_t s) -> Made {
                     return {[](const In& in) { return num::concat<double>({in[0], in[1]}, 1); },
                             {param({2, 3, 2}, s), param({2, 1, 2}, s + 1)}};
                 }});
    unary("relu", [](const auto& a) { return num::relu(a); });
    unary("leaky_relu", [](const auto& a) { return num::leaky_relu(a, 0.1); });
    unary("sigmoid", [](const auto& a) { return num::sigmoid(a); });
    unary("softplus", [](const auto& a) { return num::softplus(a); });
    unary("log_softmax", [](const auto& a) { return num::log_softmax(a); });
    unary("sum", [](const auto& a) { return num::sum(a); });
    unary("mean", [](const auto& a) { return num::mean(a); });
    c.push_back({"conv2d", [](std::uint64_t s) -> Made {
                     return {[](const In& in) { return num::conv2d(in[0], in[1], in[2], 1, 2, 1); },
                             {param({1, 2, 5, 5}, s), param({3, 2, 3, 3}, s + 1), param({3}, s + 2)}};
                 }});
    c.push_back({"conv2d_strided", [](std::uint64_t s) -> Made {
                     return {[](const In& in) { return num::conv2d(in[0], in[1], in[2], 2, 1, 1); },
                             {param({2, 2, 6, 5}, s), param({3, 2, 3, 3}, s + 1), param({3}, s + 2)}};
                 }});
    c.push_back({"conv_transpose2d", [](std::uint64_t s) -> Made {
                     return {[](const In& in) { return num::conv_transpose2d(in[0], in[1], in[2], 2); },
                             {param({1, 2, 3, 3}, s), param({2, 3, 2, 2}, s + 1), param({3}, s + 2)}};
                 }});
    unary("pixel_shuffle", [](const auto& a) { return num::pixel_shuffle(a, 2); }, {1, 8, 2, 3});
    unary("pixel_unshuffle", [](const auto& a) { return num::pixel_unshuffle(a, 2); }, {1, 2, 4, 6});
    c.push_back({"bce_loss", [](std::uint64_t s) -> Made {
                     const auto target = detail::binary_target({2, 1, 3, 3}, s + 1);
                     return {[target](const In& in) { return losses::bce_loss(in[0], target); },
                             {param({2, 1, 3, 3}, s)}};
                 }});
    c.push_back({"adv_loss_discriminator", [](std::uint64_t s) -> Made {
                     return {[](const In& in) {
                                 const std::vector<int> labels{0, 2, 1, 2};
                                 return losses::adv_loss_discriminator(in[0], labels);
                             },
                             {param({4, 3}, s)}};
                 }});
    c.push_back({"adv_loss_shared", [](std::uint64_t s) -> Made {
                     return {[](const In& in) {
                                 const std::vector<int> labels{1, 1, 2};
                                 return losses::adv_loss_shared(in[0], labels);
                             },
                             {param({3, 3}, s)}};
                 }});
    c.push_back({"diff_loss", [](std::uint64_t s) -> Made {
                     return {[](const In& in) { return losses::diff_loss(in[0], in[1]); },
                             {param({3, 4}, s), param({3, 4}, s + 1)}};
                 }});
    c.push_back({"total_loss", [](std::uint64_t s) -> Made {
                     return {[](const In& in) {
                                 return losses::total_loss(in[0], in[1], in[2], losses::LossWeights{1.0, 0.05, 0.3});
                             },
                             {param({1}, s), param({1}, s + 1), param({1}, s + 2)}};
                 }});
    c.push_back({"lwf_distill", [](std::uint64_t s) -> Made {
                     const auto old = num::random_normal<double>({2, 1, 3, 3}, s + 1);
                     return {[old](const In& in) { return losses::lwf_distill(old, in[0]); }, {param({2, 1, 3, 3}, s)}};
                 }});
    return c;
}

inline std::vector<std::string> gradient_case_names() {
    std::vector<std::string> names;
    for (const auto& c : gradient_cases()) names.push_back(c.op);
    return names;
}

/// Runs the cases whose names are in `only` (all when empty), each over three
/// seeds, and reports the worst relative error per op.
inline std::vector<GradResult> run_gradient_suite(const std::set<std::string>& only = {}) {
    const auto cases = gradient_cases();
    for (const auto& name : only) {
        const bool known = std::any_of(cases.begin(), cases.end(), [&](const GradCase& c) { return c.op == name; });
        if (!known) throw ConfigError("unknown op '" + name + "' for gradcheck");
    }
    std::vector<GradResult> out;
    for (const auto& gc : cases) {
        if (!only.empty() && !only.count(gc.op)) continue;
        GradResult r{gc.op, 0.0, false};
        for (std::uint64_t seed : {101, 202, 303}) {
            auto [fn, inputs] = gc.make(seed);
            r.max_error = std::max(r.max_error, num::check_gradients(fn, std::move(inputs), seed));
        }
        r.passed = r.max_error <= kGradTolerance;
        out.push_back(r);
    }
    return out;
}

}  // namespace aclseg
