#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/errors.hpp"
#include "aclseg/model/layers.hpp"

namespace aclseg::baselines {

using model::Conv2d;
using model::ParameterList;
using num::Shape;
using num::Tensor;

struct UNetConfig {
    std::size_t depth = 3;
    std::size_t base_channels = 16;
    std::size_t height = 128, width = 128;
    std::uint64_t seed = 0;

    void validate() const {
        if (depth < 1) throw ConfigError("unet depth must be >= 1");
        if (base_channels < 1) throw ConfigError("unet base_channels must be >= 1");
        const std::size_t f = std::size_t{1} << depth;
        if (height == 0 || width == 0 || height % f || width % f) {
            throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                              " must be divisible by 2^depth = " + std::to_string(f));
        }
    }

    nlohmann::json to_json() const {
        return {{"depth", depth}, {"base_channels", base_channels}, {"image_size", {height, width}}, {"seed", seed}};
    }

    static UNetConfig from_json(const nlohmann::json& j) {
        UNetConfig c;
        c.depth = j.at("depth").get<std::size_t>();
        c.base_channels = j.at("base_channels").get<std::size_t>();
        c.height = j.at("image_size").at(0).get<std::size_t>();
        c.width = j.at("image_size").at(1).get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

/// Encoder-decoder trunk with additive skip connections and one 1×1 output
/// head per task. Downsampling is a stride-2 3×3 conv; upsampling is a 1×1
/// conv to 4× channels followed by pixel_shuffle(2).
template <typename T>
class MultiHeadUNet {
public:
    explicit MultiHeadUNet(UNetConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        const auto seed = [&](const char* tag, std::size_t i) { return num::derive_seed(cfg_.seed, tag, i); };
        const std::size_t c0 = cfg_.base_channels;
        stem_ = Conv2d<T>(1, c0, 3, seed("unet.stem", 0), 1, 1, 1);
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::size_t cin = c0 << l, cout = c0 << (l + 1);
            down_.emplace_back(cin, cout, 3, seed("unet.down", l), 2, 1, 1);
            up_.emplace_back(cout, cin * 4, 1, seed("unet.up", l));
            merge_.emplace_back(cin, cin, 3, seed("unet.merge", l), 1, 1, 1);
        }
    }

    const UNetConfig& config() const { return cfg_; }
    std::size_t head_count() const { return heads_.size(); }

    void add_head() { heads_.emplace_back(cfg_.base_channels, 1, 1, num::derive_seed(cfg_.seed, "unet.head", heads_.size())); }

    /// Shared feature map N×base×H×W.
    Tensor<T> trunk(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.height || x.dim(3) != cfg_.width) {
            throw ShapeError("unet input " + num::shape_str(x.shape()) + " expected N x 1 x " +
                             std::to_string(cfg_.height) + " x " + std::to_string(cfg_.width));
        }
        std::vector<Tensor<T>> skips{model::lrelu(stem_(x))};
        for (const auto& d : down_) skips.push_back(model::lrelu(d(skips.back())));
        Tensor<T> h = skips.back();
        for (std::size_t l = cfg_.depth; l-- > 0;) {
            const auto up = num::pixel_shuffle(up_[l](h), 2);
            h = model::lrelu(merge_[l](num::add(up, skips[l])));
        }
        return h;
    }

    Tensor<T> head(std::size_t k, const Tensor<T>& features) const {
        check_head(k);
        return heads_[k](features);
    }

    Tensor<T> segment(std::size_t k, const Tensor<T>& x) const { return head(k, trunk(x)); }

    ParameterList<T> trunk_parameters() const {
        ParameterList<T> p;
        stem_.collect(p, "unet.stem");
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            down_[l].collect(p, "unet.down" + std::to_string(l));
            up_[l].collect(p, "unet.up" + std::to_string(l));
            merge_[l].collect(p, "unet.merge" + std::to_string(l));
        }
        return p;
    }

    ParameterList<T> head_parameters(std::size_t k) const {
        check_head(k);
        ParameterList<T> p;
        heads_[k].collect(p, "unet.head" + std::to_string(k));
        return p;
    }

    ParameterList<T> parameters() const {
        auto p = trunk_parameters();
        for (std::size_t k = 0; k < heads_.size(); ++k) {
            auto h = head_parameters(k);
            p.insert(p.end(), h.begin(), h.end());
        }
        return p;
    }

private:
    void check_head(std::size_t k) const {
        if (k >= heads_.size()) {
            throw ContractError("head index " + std::to_string(k) + " out of range (" + std::to_string(heads_.size()) +
                                " heads)");
        }
    }

    UNetConfig cfg_;
    Conv2d<T> stem_;
    std::vector<Conv2d<T>> down_, up_, merge_;
    std::vector<Conv2d<T>> heads_;
};

}  // namespace aclseg::baselines
