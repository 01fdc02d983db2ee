#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "aclseg/numerics/tensor.hpp"

namespace aclseg::num {

// Test hook: the named op deliberately corrupts its backward pass. Used to
// prove the gradient checker catches a wrong derivative.
inline std::string& injected_fault() {
    static std::string op;
    return op;
}

inline bool fault_injected(const char* op) { return injected_fault() == op; }

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using SMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CSMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
    }
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
    Buffer<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    return make_result<T>(x.shape(), std::move(out), {x}, [deriv](Node<T>& self) {
        auto gx = sink(self, 0);
        if (gx.empty()) return;
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], self.value[i]);
    });
}

// Range [lo, hi) of output columns whose input column ox·stride + offset
// lies inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_span(long offset, std::size_t stride, std::size_t W,
                                                      std::size_t Wo) {
    const long s = static_cast<long>(stride);
    long lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
    long hi = static_cast<long>(W) - offset <= 0 ? 0 : (static_cast<long>(W) - offset + s - 1) / s;
    hi = std::min(hi, static_cast<long>(Wo));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Unfolds output rows [oy0, oy1) of one image (C×H×W) into a
// (C·kh·kw)×((oy1−oy0)·Wo) column matrix.
template <typename T>
void im2col(const T* src, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t dil, std::size_t oy0, std::size_t oy1, std::size_t Wo,
            T* dst) {
    const long h_lim = static_cast<long>(H);
    const std::size_t band = (oy1 - oy0) * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        const T* plane = src + c * H * W;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                T* row = dst + ((c * kh + ki) * kw + kj) * band;
                const long di = static_cast<long>(ki * dil) - static_cast<long>(pad);
                const long dj = static_cast<long>(kj * dil) - static_cast<long>(pad);
                const auto [lo, hi] = valid_span(dj, stride, W, Wo);
                for (std::size_t oy = oy0; oy < oy1; ++oy) {
                    const long iy = static_cast<long>(oy * stride) + di;
                    T* out = row + (oy - oy0) * Wo;
                    if (iy < 0 || iy >= h_lim) {
                        std::fill(out, out + Wo, T(0));
                        continue;
                    }
                    std::fill(out, out + lo, T(0));
                    std::fill(out + hi, out + Wo, T(0));
                    const T* in = plane + iy * static_cast<long>(W) + dj;
                    if (stride == 1) {
                        std::copy(in + lo, in + hi, out + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = in[ox * stride];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters-and-adds a band of columns back onto the image.
template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t dil, std::size_t oy0, std::size_t oy1, std::size_t Wo,
            T* dst) {
    const long h_lim = static_cast<long>(H);
    const std::size_t band = (oy1 - oy0) * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        T* plane = dst + c * H * W;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((c * kh + ki) * kw + kj) * band;
                const long di = static_cast<long>(ki * dil) - static_cast<long>(pad);
                const long dj = static_cast<long>(kj * dil) - static_cast<long>(pad);
                const auto [lo, hi] = valid_span(dj, stride, W, Wo);
                for (std::size_t oy = oy0; oy < oy1; ++oy) {
                    const long iy = static_cast<long>(oy * stride) + di;
                    if (iy < 0 || iy >= h_lim) continue;
                    const T* in = row + (oy - oy0) * Wo;
                    T* out = plane + iy * static_cast<long>(W) + dj;
                    if (stride == 1) {
                        for (std::size_t ox = lo; ox < hi; ++ox) out[ox] += in[ox];
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) out[ox * stride] += in[ox];
                    }
                }
            }
        }
    }
}

// Output rows per im2col band, sized so one band of columns stays in L2.
inline std::size_t band_rows(std::size_t ckk, std::size_t Wo, std::size_t Ho) {
    constexpr std::size_t kBandElems = std::size_t{1} << 17;
    return std::clamp<std::size_t>(kBandElems / std::max<std::size_t>(ckk * Wo, 1), 1, Ho);
}

// Visits every row of a sub-pixel rearrangement: `f(coarse, fine, W, r)`
// pairs W coarse elements (contiguous) with W fine elements spaced r apart.
template <typename F>
void for_each_shuffle_row(std::size_t N, std::size_t C, std::size_t H, std::size_t W, std::size_t r, F&& f) {
    const std::size_t Ho = H * r, Wo = W * r;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < r; ++a)
                for (std::size_t b = 0; b < r; ++b)
                    for (std::size_t h = 0; h < H; ++h) {
                        const std::size_t coarse = (((n * C + c) * r * r + a * r + b) * H + h) * W;
                        const std::size_t fine = ((n * C + c) * Ho + h * r + a) * Wo + b;
                        f(coarse, fine, W, r);
                    }
}

struct ConvGeometry {
    std::size_t kh, kw, stride, pad, dil;
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto g = detail::sink(self, k);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto ga = detail::sink(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        auto gb = detail::sink(self, 1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        auto ga = detail::sink(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
        auto gb = detail::sink(self, 1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    return detail::unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
    return detail::unary(x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

/// Adds a per-channel bias along axis 1 of an (N, C, ...) tensor.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
        throw ShapeError("add_bias: input " + shape_str(x.shape()) + " incompatible with bias " +
                         shape_str(bias.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
    Buffer<T> out(x.values());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            T* p = out.data() + (i * c + j) * inner;
            for (std::size_t k = 0; k < inner; ++k) p[k] += bias[j];
        }
    return detail::make_result<T>(x.shape(), std::move(out), {x, bias}, [n, c, inner](Node<T>& self) {
        auto gx = detail::sink(self, 0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        auto gb = detail::sink(self, 1);
        if (gb.empty()) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const T* p = self.grad.data() + (i * c + j) * inner;
                T acc = 0;
                for (std::size_t k = 0; k < inner; ++k) acc += p[k];
                gb[j] += acc;
            }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank(a.shape(), 2, "matmul");
    detail::require_rank(b.shape(), 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Buffer<T> out(m * n);
    detail::MapR<T>(out.data(), m, n).noalias() =
        detail::CMapR<T>(a.data().data(), m, k) * detail::CMapR<T>(b.data().data(), k, n);
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        detail::CMapR<T> g(self.grad.data(), m, n);
        auto ga = detail::sink(self, 0);
        if (!ga.empty()) {
            detail::MapR<T>(ga.data(), m, k).noalias() +=
                g * detail::CMapR<T>(self.inputs[1]->value.data(), k, n).transpose();
        }
        auto gb = detail::sink(self, 1);
        if (!gb.empty()) {
            detail::MapR<T>(gb.data(), k, n).noalias() +=
                detail::CMapR<T>(self.inputs[0]->value.data(), m, k).transpose() * g;
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank(a.shape(), 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Buffer<T> out(m * n);
    detail::MapR<T>(out.data(), n, m) = detail::CMapR<T>(a.data().data(), m, n).transpose();
    return detail::make_result<T>({n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
        auto ga = detail::sink(self, 0);
        if (ga.empty()) return;
        detail::MapR<T>(ga.data(), m, n) += detail::CMapR<T>(self.grad.data(), n, m).transpose();
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return detail::make_result<T>(std::move(shape), x.values(), {x}, [](Node<T>& self) {
        auto gx = detail::sink(self, 0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    });
}

/// Collapses every axis after the first.
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
    return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape shape = parts[0].shape();
    if (axis >= shape.size()) throw ShapeError("concat: axis out of range for " + shape_str(shape));
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape probe = p.shape();
        if (probe.size() != shape.size()) throw ShapeError("concat: rank mismatch " + shape_str(probe));
        probe[axis] = shape[axis];
        if (probe != shape) {
            throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total += p.dim(axis);
    }
    shape[axis] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

    Buffer<T> out(shape_numel(shape));
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
    const std::size_t row = total * inner;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const T* src = parts[k].data().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src + o * widths[k], widths[k], out.data() + o * row + offset);
        offset += widths[k];
    }
    return detail::make_result<T>(std::move(shape), std::move(out), parts,
                                  [widths, outer, row](Node<T>& self) {
                                      std::size_t off = 0;
                                      for (std::size_t k = 0; k < widths.size(); ++k) {
                                          auto g = detail::sink(self, k);
                                          if (!g.empty()) {
                                              for (std::size_t o = 0; o < outer; ++o)
                                                  for (std::size_t i = 0; i < widths[k]; ++i)
                                                      g[o * widths[k] + i] += self.grad[o * row + off + i];
                                          }
                                          off += widths[k];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); },
                         [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.1)) {
    return detail::unary(x, [slope](T v) { return v > T(0) ? v : slope * v; },
                         [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
T sigmoid_value(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

/// log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|).
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const Eigen::Map<const Arr> xv(x.values().data(), static_cast<Eigen::Index>(x.numel()));
    Buffer<T> out(x.numel());
    Eigen::Map<Arr>(out.data(), xv.size()) = xv.max(T(0)) + (-xv.abs()).exp().log1p();
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
        auto gx = detail::sink(self, 0);
        if (gx.empty()) return;
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * sigmoid_value(xv[i]);
    });
}

/// Row-wise log-softmax of an N×K matrix.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 2, "log_softmax");
    const std::size_t n = x.dim(0), k = x.dim(1);
    Buffer<T> out(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = x.data().data() + i * k;
        const T mx = *std::max_element(row, row + k);
        T acc = 0;
        for (std::size_t j = 0; j < k; ++j) acc += std::exp(row[j] - mx);
        const T lse = mx + std::log(acc);
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [n, k](Node<T>& self) {
        auto gx = detail::sink(self, 0);
        if (gx.empty()) return;
        for (std::size_t i = 0; i < n; ++i) {
            T gsum = 0;
            for (std::size_t j = 0; j < k; ++j) gsum += self.grad[i * k + j];
            for (std::size_t j = 0; j < k; ++j)
                gx[i * k + j] += self.grad[i * k + j] - std::exp(self.value[i * k + j]) * gsum;
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    return detail::make_result<T>({1}, {acc}, {x}, [](Node<T>& self) {
        auto gx = detail::sink(self, 0);
        for (auto& g : gx) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Convolutions

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                 std::size_t dil) {
    const long span = static_cast<long>(dil * (k - 1) + 1);
    const long padded = static_cast<long>(in + 2 * pad);
    if (padded < span) return 0;
    return static_cast<std::size_t>((padded - span) / static_cast<long>(stride) + 1);
}

/// 2-D cross-correlation of N×C×H×W input with an O×C×kh×kw kernel.
///
/// Output size per axis is (H + 2·pad − dil·(kh−1) − 1)/stride + 1. `bias`
/// may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t dilation = 1, std::size_t padding = 0) {
    if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1)) {
        throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
    }
    if (stride < 1 || dilation < 1) throw ContractError("conv2d: stride and dilation must be >= 1");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
                         shape_str(kernel.shape()));
    }
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t O = kernel.dim(0);
    const detail::ConvGeometry geo{kernel.dim(2), kernel.dim(3), stride, padding, dilation};
    const std::size_t Ho = conv_out_size(H, geo.kh, stride, padding, dilation);
    const std::size_t Wo = conv_out_size(W, geo.kw, stride, padding, dilation);
    if (Ho == 0 || Wo == 0) {
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                         shape_str(input.shape()));
    }
    const std::size_t ckk = C * geo.kh * geo.kw, hw = Ho * Wo;
    const bool pointwise = geo.pointwise();
    const std::size_t rows = detail::band_rows(ckk, Wo, Ho);

    Buffer<T> out(N * O * hw);
    Buffer<T> cols(pointwise ? 0 : ckk * rows * Wo);
    detail::CMapR<T> K(kernel.data().data(), O, ckk);
    for (std::size_t n = 0; n < N; ++n) {
        const T* src = input.data().data() + n * C * H * W;
        T* dst = out.data() + n * O * hw;
        if (pointwise) {
            detail::MapR<T>(dst, O, hw).noalias() = K * detail::CMapR<T>(src, ckk, hw);
        } else {
            for (std::size_t oy0 = 0; oy0 < Ho; oy0 += rows) {
                const std::size_t oy1 = std::min(Ho, oy0 + rows), bw = (oy1 - oy0) * Wo;
                detail::im2col(src, C, H, W, geo.kh, geo.kw, stride, padding, dilation, oy0, oy1, Wo, cols.data());
                detail::SMapR<T>(dst + oy0 * Wo, O, bw, Eigen::OuterStride<>(hw)).noalias() =
                    K * detail::CMapR<T>(cols.data(), ckk, bw);
            }
        }
        if (bias.defined()) {
            detail::MapR<T> Y(dst, O, hw);
            for (std::size_t o = 0; o < O; ++o) Y.row(o).array() += bias[o];
        }
    }

    std::vector<Tensor<T>> inputs{input, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result<T>({N, O, Ho, Wo}, std::move(out), std::move(inputs), [=](Node<T>& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& kv = self.inputs[1]->value;
        auto gx = detail::sink(self, 0);
        auto gk = detail::sink(self, 1);
        std::span<T> gb = self.inputs.size() > 2 ? detail::sink(self, 2) : std::span<T>{};
        detail::CMapR<T> K(kv.data(), O, ckk);
        Buffer<T> cols(pointwise || gk.empty() ? 0 : ckk * rows * Wo);
        Buffer<T> gcols(pointwise || gx.empty() ? 0 : ckk * rows * Wo);
        for (std::size_t n = 0; n < N; ++n) {
            const T* g = self.grad.data() + n * O * hw;
            const T* x = xv.data() + n * C * H * W;
            T* dx = gx.empty() ? nullptr : gx.data() + n * C * H * W;
            if (!gb.empty()) {
                detail::CMapR<T> G(g, O, hw);
                for (std::size_t o = 0; o < O; ++o) gb[o] += G.row(o).sum();
            }
            if (pointwise) {
                detail::CMapR<T> G(g, O, hw);
                if (!gk.empty()) detail::MapR<T>(gk.data(), O, ckk).noalias() += G * detail::CMapR<T>(x, ckk, hw).transpose();
                if (dx) detail::MapR<T>(dx, ckk, hw).noalias() += K.transpose() * G;
                continue;
            }
            for (std::size_t oy0 = 0; oy0 < Ho; oy0 += rows) {
                const std::size_t oy1 = std::min(Ho, oy0 + rows), bw = (oy1 - oy0) * Wo;
                detail::CSMapR<T> G(g + oy0 * Wo, O, bw, Eigen::OuterStride<>(hw));
                if (!gk.empty()) {
                    detail::im2col(x, C, H, W, geo.kh, geo.kw, stride, padding, dilation, oy0, oy1, Wo, cols.data());
                    detail::MapR<T>(gk.data(), O, ckk).noalias() +=
                        G * detail::CMapR<T>(cols.data(), ckk, bw).transpose();
                }
                if (dx) {
                    detail::MapR<T>(gcols.data(), ckk, bw).noalias() = K.transpose() * G;
                    if (fault_injected("conv2d")) {
                        for (auto& v : gcols) v = -v;
                    }
                    detail::col2im(gcols.data(), C, H, W, geo.kh, geo.kw, stride, padding, dilation, oy0, oy1, Wo,
                                   dx);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           std::size_t stride = 1, std::size_t padding = 0, std::size_t dilation = 1) {
    if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(0)) {
        throw ShapeError("conv_transpose2d: input " + shape_str(input.shape()) +
                         " incompatible with kernel " + shape_str(kernel.shape()));
    }
    if (stride < 1 || dilation < 1) throw ContractError("conv_transpose2d: stride and dilation must be >= 1");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t O = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) {
        throw ShapeError("conv_transpose2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
                         shape_str(kernel.shape()));
    }
    const long ho = static_cast<long>((H - 1) * stride + dilation * (kh - 1) + 1) - 2 * static_cast<long>(padding);
    const long wo = static_cast<long>((W - 1) * stride + dilation * (kw - 1) + 1) - 2 * static_cast<long>(padding);
    if (ho <= 0 || wo <= 0) throw ShapeError("conv_transpose2d: padding leaves no output");
    const std::size_t Ho = static_cast<std::size_t>(ho), Wo = static_cast<std::size_t>(wo);
    const std::size_t okk = O * kh * kw, hw = H * W;

    Buffer<T> out(N * O * Ho * Wo, T(0));
    Buffer<T> cols(okk * hw);
    detail::CMapR<T> K(kernel.data().data(), C, okk);
    for (std::size_t n = 0; n < N; ++n) {
        detail::MapR<T>(cols.data(), okk, hw).noalias() =
            K.transpose() * detail::CMapR<T>(input.data().data() + n * C * hw, C, hw);
        T* dst = out.data() + n * O * Ho * Wo;
        detail::col2im(cols.data(), O, Ho, Wo, kh, kw, stride, padding, dilation, 0, H, W, dst);
        if (bias.defined()) {
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t i = 0; i < Ho * Wo; ++i) dst[o * Ho * Wo + i] += bias[o];
        }
    }

    std::vector<Tensor<T>> inputs{input, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result<T>({N, O, Ho, Wo}, std::move(out), std::move(inputs), [=](Node<T>& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& kv = self.inputs[1]->value;
        auto gx = detail::sink(self, 0);
        auto gk = detail::sink(self, 1);
        std::span<T> gb = self.inputs.size() > 2 ? detail::sink(self, 2) : std::span<T>{};
        Buffer<T> gcols(okk * hw);
        for (std::size_t n = 0; n < N; ++n) {
            const T* g = self.grad.data() + n * O * Ho * Wo;
            if (!gb.empty()) {
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t i = 0; i < Ho * Wo; ++i) gb[o] += g[o * Ho * Wo + i];
            }
            if (gx.empty() && gk.empty()) continue;
            detail::im2col(g, O, Ho, Wo, kh, kw, stride, padding, dilation, 0, H, W, gcols.data());
            detail::CMapR<T> Gc(gcols.data(), okk, hw);
            if (!gx.empty()) {
                detail::MapR<T>(gx.data() + n * C * hw, C, hw).noalias() +=
                    detail::CMapR<T>(kv.data(), C, okk) * Gc;
            }
            if (!gk.empty()) {
                detail::MapR<T>(gk.data(), C, okk).noalias() +=
                    detail::CMapR<T>(xv.data() + n * C * hw, C, hw) * Gc.transpose();
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Sub-pixel rearrangement

/// N×(C·r²)×H×W → N×C×(rH)×(rW) with out(n, c, r·h+a, r·w+b) = x(n, c·r²+a·r+b, h, w).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
    detail::require_rank(x.shape(), 4, "pixel_shuffle");
    if (r < 1 || x.dim(1) % (r * r) != 0) {
        throw ShapeError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by r^2 = " +
                         std::to_string(r * r));
    }
    const std::size_t N = x.dim(0), C = x.dim(1) / (r * r), H = x.dim(2), W = x.dim(3);
    Buffer<T> out(x.numel());
    const T* xv = x.values().data();
    detail::for_each_shuffle_row(N, C, H, W, r, [&](std::size_t cs, std::size_t fs, std::size_t w, std::size_t step) {
        for (std::size_t i = 0; i < w; ++i) out[fs + i * step] = xv[cs + i];
    });
    return detail::make_result<T>({N, C, H * r, W * r}, std::move(out), {x}, [N, C, H, W, r](Node<T>& self) {
        auto gx = detail::sink(self, 0);
        if (gx.empty()) return;
        const T* g = self.grad.data();
        detail::for_each_shuffle_row(N, C, H, W, r, [&](std::size_t cs, std::size_t fs, std::size_t w, std::size_t step) {
            for (std::size_t i = 0; i < w; ++i) gx[cs + i] += g[fs + i * step];
        });
    });
}

/// Inverse of pixel_shuffle: N×C×(rH)×(rW) → N×(C·r²)×H×W.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
    detail::require_rank(x.shape(), 4, "pixel_unshuffle");
    if (r < 1 || x.dim(2) % r != 0 || x.dim(3) % r != 0) {
        throw ShapeError("pixel_unshuffle: spatial size of " + shape_str(x.shape()) +
                         " not divisible by r = " + std::to_string(r));
    }
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2) / r, W = x.dim(3) / r;
    Buffer<T> out(x.numel());
    const T* xv = x.values().data();
    detail::for_each_shuffle_row(N, C, H, W, r, [&](std::size_t cs, std::size_t fs, std::size_t w, std::size_t step) {
        for (std::size_t i = 0; i < w; ++i) out[cs + i] = xv[fs + i * step];
    });
    return detail::make_result<T>({N, C * r * r, H, W}, std::move(out), {x}, [N, C, H, W, r](Node<T>& self) {
        auto gx = detail::sink(self, 0);
        if (gx.empty()) return;
        const T* g = self.grad.data();
        detail::for_each_shuffle_row(N, C, H, W, r, [&](std::size_t cs, std::size_t fs, std::size_t w, std::size_t step) {
            for (std::size_t i = 0; i < w; ++i) gx[fs + i * step] += g[cs + i];
        });
    });
}

}  // namespace aclseg::num
