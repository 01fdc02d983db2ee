#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "aclseg/numerics/tensor.hpp"

namespace aclseg::num {

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the tag
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return mix_seed(mix_seed(base) ^ h ^ mix_seed(index + 0x51ed270b27ULL));
}

using Rng = std::mt19937_64;

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

/// Kaiming-style gaussian: N(0, 2 / fan_in), fan_in = numel / shape[0].
template <typename T>
Tensor<T> gaussian_init(const Shape& shape, std::uint64_t seed, bool requires_grad = true) {
    Tensor<T> t(shape, T(0), requires_grad);
    const double fan_in = static_cast<double>(t.numel() / shape.at(0));
    Rng rng(seed);
    fill_normal(t, rng, std::sqrt(2.0 / fan_in));
    return t;
}

template <typename T>
Tensor<T> uniform_init(const Shape& shape, std::uint64_t seed, double lo, double hi,
                       bool requires_grad = true) {
    Tensor<T> t(shape, T(0), requires_grad);
    Rng rng(seed);
    fill_uniform(t, rng, lo, hi);
    return t;
}

/// Standard-normal samples; the discriminator's noise features come from here.
template <typename T>
Tensor<T> random_normal(const Shape& shape, std::uint64_t seed) {
    Tensor<T> t(shape);
    Rng rng(seed);
    fill_normal(t, rng);
    return t;
}

}  // namespace aclseg::num
