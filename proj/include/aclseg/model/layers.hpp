#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aclseg/numerics/init.hpp"
#include "aclseg/numerics/ops.hpp"

namespace aclseg::model {

using num::Shape;
using num::Tensor;

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;

inline constexpr double kLeakySlope = 0.1;

template <typename T>
Tensor<T> lrelu(const Tensor<T>& x) {
    return num::leaky_relu(x, static_cast<T>(kLeakySlope));
}

template <typename T>
struct Conv2d {
    Tensor<T> kernel;
    Tensor<T> bias;
    std::size_t stride = 1, dilation = 1, padding = 0;

    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t k, std::uint64_t seed, std::size_t stride_ = 1,
           std::size_t dilation_ = 1, std::size_t padding_ = 0)
        : kernel(num::gaussian_init<T>({out, in, k, k}, seed)),
          bias(Shape{out}, T(0), true),
          stride(stride_),
          dilation(dilation_),
          padding(padding_) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return num::conv2d(x, kernel, bias, stride, dilation, padding); }

    void collect(ParameterList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".kernel", kernel});
        out.push_back({prefix + ".bias", bias});
    }
};

template <typename T>
struct ConvTranspose2d {
    Tensor<T> kernel;  // in × out × k × k
    Tensor<T> bias;
    std::size_t stride = 1;

    ConvTranspose2d() = default;
    ConvTranspose2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::uint64_t seed)
        : kernel(Shape{in, out, k, k}, T(0), true), bias(Shape{out}, T(0), true), stride(stride_) {
        // Fan-in of a transposed conv is in·k²/stride² taps per output pixel.
        num::Rng rng(seed);
        num::fill_normal(kernel, rng, std::sqrt(2.0 * static_cast<double>(stride * stride) / static_cast<double>(in * k * k)));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return num::conv_transpose2d(x, kernel, bias, stride); }

    void collect(ParameterList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".kernel", kernel});
        out.push_back({prefix + ".bias", bias});
    }
};

template <typename T>
struct Linear {
    Tensor<T> weight;  // out × in
    Tensor<T> bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, std::uint64_t seed)
        : weight(num::gaussian_init<T>({out, in}, seed)), bias(Shape{out}, T(0), true) {}

    Tensor<T> operator()(const Tensor<T>& x, bool detach_params = false) const {
        const Tensor<T> w = detach_params ? weight.detach() : weight;
        const Tensor<T> b = detach_params ? bias.detach() : bias;
        return num::add_bias(num::matmul(x, num::transpose(w)), b);
    }

    void collect(ParameterList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

template <typename T>
std::size_t count_parameters(const ParameterList<T>& params, bool trainable_only = false) {
    std::size_t n = 0;
    for (const auto& p : params)
        if (!trainable_only || p.tensor.requires_grad()) n += p.tensor.numel();
    return n;
}

template <typename T>
void set_trainable(const ParameterList<T>& params, bool flag) {
    for (auto p : params) p.tensor.set_requires_grad(flag);
}

template <typename T>
void zero_grads(const ParameterList<T>& params) {
    for (auto p : params) p.tensor.zero_grad();
}

/// Value snapshot of a parameter list, restorable with restore_values().
template <typename T>
std::vector<num::Buffer<T>> snapshot_values(const ParameterList<T>& params) {
    std::vector<num::Buffer<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.tensor.values());
    return out;
}

template <typename T>
void restore_values(const ParameterList<T>& params, const std::vector<num::Buffer<T>>& values) {
    if (params.size() != values.size()) throw ContractError("restore_values: parameter count changed");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto t = params[i].tensor;
        if (t.numel() != values[i].size()) throw ShapeError("restore_values: size changed for " + params[i].name);
        std::copy(values[i].begin(), values[i].end(), t.data().begin());
    }
}

/// Copies values between two structurally identical parameter lists.
template <typename T>
void copy_values(const ParameterList<T>& from, const ParameterList<T>& to) {
    if (from.size() != to.size()) throw ContractError("copy_values: parameter lists differ in length");
    for (std::size_t i = 0; i < from.size(); ++i) {
        if (from[i].name != to[i].name || from[i].tensor.shape() != to[i].tensor.shape()) {
            throw ShapeError("copy_values: mismatch at " + from[i].name);
        }
        auto dst = to[i].tensor;
        std::copy(from[i].tensor.data().begin(), from[i].tensor.data().end(), dst.data().begin());
    }
}

}  // namespace aclseg::model
