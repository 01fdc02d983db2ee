#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/errors.hpp"
#include "aclseg/model/layers.hpp"

namespace aclseg::model {

/// Architecture variants. `basic_enc` and `aspp_ps` are the ablation steps
/// leading up to the full model.
enum class Variant { basic_enc, aspp_ps, full };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::basic_enc: return "basic_enc";
        case Variant::aspp_ps: return "aspp_ps";
        case Variant::full: return "full";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "basic_enc") return Variant::basic_enc;
    if (s == "aspp_ps") return Variant::aspp_ps;
    if (s == "full") return Variant::full;
    throw ConfigError("unknown model variant '" + s + "' (expected basic_enc, aspp_ps or full)");
}

struct ModelConfig {
    std::size_t latent_dim = 64;
    std::size_t base_channels = 16;
    std::vector<std::size_t> aspp_rates{1, 2, 4, 8};
    Variant variant = Variant::full;
    std::size_t height = 128, width = 128;
    std::uint64_t seed = 0;

    std::size_t grid_h() const { return height / 16; }
    std::size_t grid_w() const { return width / 16; }

    void validate() const {
        if (height == 0 || width == 0 || height % 16 || width % 16) {
            throw ConfigError("image size must be divisible by 16, got " + std::to_string(height) + "x" +
                              std::to_string(width));
        }
        if (latent_dim != grid_h() * grid_w()) {
            throw ConfigError("latent_dim " + std::to_string(latent_dim) + " must equal (H/16)*(W/16) = " +
                              std::to_string(grid_h() * grid_w()));
        }
        if (base_channels < 2 || base_channels % 2) throw ConfigError("base_channels must be even and >= 2");
        if (aspp_rates.empty()) throw ConfigError("aspp_rates must not be empty");
        for (auto r : aspp_rates)
            if (r < 1) throw ConfigError("aspp rates must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"latent_dim", latent_dim}, {"base_channels", base_channels}, {"aspp_rates", aspp_rates},
                {"variant", to_string(variant)}, {"image_size", {height, width}}, {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.latent_dim = j.at("latent_dim").get<std::size_t>();
        c.base_channels = j.at("base_channels").get<std::size_t>();
        c.aspp_rates = j.at("aspp_rates").get<std::vector<std::size_t>>();
        c.variant = variant_from_string(j.at("variant").get<std::string>());
        c.height = j.at("image_size").at(0).get<std::size_t>();
        c.width = j.at("image_size").at(1).get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

/// Two 4×-downsampling stages, each a pair of stride-2 3×3 convs.
template <typename T>
struct DownsamplingEncoder {
    std::vector<Conv2d<T>> convs;

    DownsamplingEncoder() = default;
    DownsamplingEncoder(std::size_t c1, std::size_t c2, std::uint64_t seed) {
        const std::size_t widths[5] = {1, c1, c1, c2, c2};
        for (std::size_t i = 0; i < 4; ++i)
            convs.emplace_back(widths[i], widths[i + 1], 3, num::derive_seed(seed, "down", i), 2, 1, 1);
    }

    Tensor<T> operator()(Tensor<T> x) const {
        for (const auto& c : convs) x = lrelu(c(x));
        return x;
    }

    void collect(ParameterList<T>& out, const std::string& prefix) const {
        for (std::size_t i = 0; i < convs.size(); ++i)
            convs[i].collect(out, prefix + ".stage" + std::to_string(i / 2 + 1) + ".conv" + std::to_string(i % 2));
    }
};

/// Shared (task-invariant) encoder: downsampling stages, optional ASPP block,
/// 1-channel projection, flattened to latent_dim.
template <typename T>
struct SharedModule {
    DownsamplingEncoder<T> encoder;
    std::vector<Conv2d<T>> aspp_branches;
    Conv2d<T> aspp_fuse;
    Conv2d<T> projection;
    bool use_aspp = true;

    SharedModule() = default;
    explicit SharedModule(const ModelConfig& cfg) {
        const std::size_t c = cfg.base_channels, c2 = 2 * cfg.base_channels;
        encoder = DownsamplingEncoder<T>(c, c2, num::derive_seed(cfg.seed, "shared.encoder"));
        use_aspp = cfg.variant != Variant::basic_enc;
        if (use_aspp) {
            for (std::size_t i = 0; i < cfg.aspp_rates.size(); ++i) {
                const std::size_t r = cfg.aspp_rates[i];
                aspp_branches.emplace_back(c2, c2, 3, num::derive_seed(cfg.seed, "shared.aspp", i), 1, r, r);
            }
            aspp_fuse = Conv2d<T>(c2 * cfg.aspp_rates.size(), c2, 1, num::derive_seed(cfg.seed, "shared.aspp.fuse"));
        }
        projection = Conv2d<T>(c2, 1, 1, num::derive_seed(cfg.seed, "shared.projection"));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> h = encoder(x);
        if (use_aspp) {
            std::vector<Tensor<T>> branches;
            for (const auto& b : aspp_branches) branches.push_back(lrelu(b(h)));
            h = lrelu(aspp_fuse(num::concat(branches, 1)));
        }
        return num::flatten(projection(h));
    }

    void collect(ParameterList<T>& out, const std::string& prefix) const {
        encoder.collect(out, prefix);
        if (use_aspp) {
            for (std::size_t i = 0; i < aspp_branches.size(); ++i)
                aspp_branches[i].collect(out, prefix + ".aspp.branch" + std::to_string(i));
            aspp_fuse.collect(out, prefix + ".aspp.fuse");
        }
        projection.collect(out, prefix + ".projection");
    }
};

/// Per-task private encoder, half the shared module's channel widths.
template <typename T>
struct PrivateModule {
    DownsamplingEncoder<T> encoder;
    Conv2d<T> projection;

    PrivateModule() = default;
    PrivateModule(const ModelConfig& cfg, std::size_t task) {
        const std::size_t c = cfg.base_channels / 2, c2 = cfg.base_channels;
        encoder = DownsamplingEncoder<T>(c, c2, num::derive_seed(cfg.seed, "private.encoder", task));
        projection = Conv2d<T>(c2, 1, 1, num::derive_seed(cfg.seed, "private.projection", task));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return num::flatten(projection(encoder(x))); }

    void collect(ParameterList<T>& out, const std::string& prefix) const {
        encoder.collect(out, prefix);
        projection.collect(out, prefix + ".projection");
    }
};

/// Decoder from the 2-channel fused latent grid to full-resolution logits:
/// two ×4 upsampling stages (sub-pixel conv, or transposed conv for
/// basic_enc) and a 1-channel projection.
template <typename T>
struct TaskHead {
    Conv2d<T> block1, block2, projection;
    ConvTranspose2d<T> up1, up2;  // basic_enc only
    bool subpixel = true;

    TaskHead() = default;
    TaskHead(const ModelConfig& cfg, std::size_t task) {
        const std::size_t c1 = cfg.base_channels, c2 = cfg.base_channels / 2;
        subpixel = cfg.variant != Variant::basic_enc;
        auto seed = [&](const char* tag) { return num::derive_seed(cfg.seed, tag, task); };
        if (subpixel) {
            block1 = Conv2d<T>(2, c1 * 16, 3, seed("head.block1"), 1, 1, 1);
            block2 = Conv2d<T>(c1, c2 * 16, 3, seed("head.block2"), 1, 1, 1);
        } else {
            block1 = Conv2d<T>(2, c1, 3, seed("head.block1"), 1, 1, 1);
            up1 = ConvTranspose2d<T>(c1, c1, 4, 4, seed("head.up1"));
            block2 = Conv2d<T>(c1, c2, 3, seed("head.block2"), 1, 1, 1);
            up2 = ConvTranspose2d<T>(c2, c2, 4, 4, seed("head.up2"));
        }
        projection = Conv2d<T>(c2, 1, 3, seed("head.projection"), 1, 1, 1);
    }

    Tensor<T> operator()(const Tensor<T>& fused) const {
        Tensor<T> h;
        if (subpixel) {
            h = num::pixel_shuffle(lrelu(block1(fused)), 4);
            h = num::pixel_shuffle(lrelu(block2(h)), 4);
        } else {
            h = lrelu(up1(lrelu(block1(fused))));
            h = lrelu(up2(lrelu(block2(h))));
        }
        return projection(h);
    }

    void collect(ParameterList<T>& out, const std::string& prefix) const {
        block1.collect(out, prefix + ".block1");
        if (!subpixel) up1.collect(out, prefix + ".up1");
        block2.collect(out, prefix + ".block2");
        if (!subpixel) up2.collect(out, prefix + ".up2");
        projection.collect(out, prefix + ".projection");
    }
};

/// Task-label classifier on the shared latent. Output 0 is the noise label,
/// output k the k-th task (1-based).
template <typename T>
struct Discriminator {
    Linear<T> fc1, fc2, out;
    std::uint64_t seed = 0;

    Discriminator() = default;
    Discriminator(const ModelConfig& cfg)
        : fc1(cfg.latent_dim, 4 * cfg.latent_dim, num::derive_seed(cfg.seed, "disc.fc1")),
          fc2(4 * cfg.latent_dim, 4 * cfg.latent_dim, num::derive_seed(cfg.seed, "disc.fc2")),
          out(4 * cfg.latent_dim, 1, num::derive_seed(cfg.seed, "disc.out", 0)),
          seed(cfg.seed) {}

    std::size_t width() const { return out.weight.dim(0); }

    /// Appends one output row; existing rows keep their values.
    void grow() {
        const std::size_t rows = width(), in = out.weight.dim(1);
        auto fresh = num::gaussian_init<T>({1, in}, num::derive_seed(seed, "disc.out", rows));
        num::Buffer<T> w(out.weight.values());
        w.insert(w.end(), fresh.data().begin(), fresh.data().end());
        num::Buffer<T> b(out.bias.values());
        b.push_back(T(0));
        const bool trainable = out.weight.requires_grad();
        out.weight = Tensor<T>({rows + 1, in}, std::move(w), trainable);
        out.bias = Tensor<T>({rows + 1}, std::move(b), trainable);
    }

    Tensor<T> operator()(const Tensor<T>& z, bool detach_params = false) const {
        auto h = lrelu(fc1(z, detach_params));
        h = lrelu(fc2(h, detach_params));
        return out(h, detach_params);
    }

    void collect(ParameterList<T>& o, const std::string& prefix) const {
        fc1.collect(o, prefix + ".fc1");
        fc2.collect(o, prefix + ".fc2");
        out.collect(o, prefix + ".out");
    }
};

/// Shared module + per-task private modules and heads + discriminator.
///
/// Tasks are indexed from 0 here; the discriminator label of task k is k+1.
template <typename T>
class ACLSegModel {
public:
    explicit ACLSegModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        shared_ = SharedModule<T>(cfg_);
        discriminator_ = Discriminator<T>(cfg_);
    }

    const ModelConfig& config() const { return cfg_; }
    std::size_t task_count() const { return privates_.size(); }
    int frozen_through() const { return frozen_through_; }

    /// Adds a private module and head for a new task, widens the
    /// discriminator, and (by default) freezes the previous task's modules.
    void add_task(bool freeze_previous = true) {
        const std::size_t k = privates_.size();
        if (freeze_previous && k > 0) freeze(k - 1);
        privates_.emplace_back(cfg_, k);
        heads_.emplace_back(cfg_, k);
        discriminator_.grow();
    }

    void freeze(std::size_t k) {
        check_task(k);
        ParameterList<T> params;
        privates_[k].collect(params, "p");
        heads_[k].collect(params, "h");
        set_trainable(params, false);
        frozen_through_ = std::max(frozen_through_, static_cast<int>(k));
    }

    bool is_frozen(std::size_t k) const { return static_cast<int>(k) <= frozen_through_; }

    Tensor<T> forward_shared(const Tensor<T>& x) const {
        check_input(x);
        return shared_(x);
    }

    Tensor<T> forward_private(std::size_t k, const Tensor<T>& x) const {
        check_task(k);
        check_input(x);
        return privates_[k](x);
    }

    /// N×latent pair → N×2×(H/16)×(W/16). The full model stacks the
    /// elementwise product and sum; ablation variants stack the raw pair.
    Tensor<T> fuse(const Tensor<T>& zs, const Tensor<T>& zp) const {
        if (zs.shape() != zp.shape() || zs.rank() != 2 || zs.dim(1) != cfg_.latent_dim) {
            throw ShapeError("fuse: latent shapes " + num::shape_str(zs.shape()) + " and " +
                             num::shape_str(zp.shape()) + " must both be N x " + std::to_string(cfg_.latent_dim));
        }
        const std::size_t n = zs.dim(0);
        const Shape grid{n, 1, cfg_.grid_h(), cfg_.grid_w()};
        if (cfg_.variant == Variant::full) {
            return num::concat<T>({num::reshape(num::mul(zs, zp), grid), num::reshape(num::add(zs, zp), grid)}, 1);
        }
        return num::concat<T>({num::reshape(zs, grid), num::reshape(zp, grid)}, 1);
    }

    Tensor<T> forward_head(std::size_t k, const Tensor<T>& fused) const {
        check_task(k);
        const Shape expect{fused.rank() == 4 ? fused.dim(0) : 0, 2, cfg_.grid_h(), cfg_.grid_w()};
        if (fused.shape() != expect) {
            throw ShapeError("forward_head: fused input " + num::shape_str(fused.shape()) + " expected " +
                             num::shape_str(expect));
        }
        return heads_[k](fused);
    }

    Tensor<T> forward_discriminator(const Tensor<T>& z, bool detach_params = false) const {
        if (z.rank() != 2 || z.dim(1) != cfg_.latent_dim) {
            throw ShapeError("forward_discriminator: latent " + num::shape_str(z.shape()) + " expected N x " +
                             std::to_string(cfg_.latent_dim));
        }
        return discriminator_(z, detach_params);
    }

    std::size_t discriminator_width() const { return discriminator_.width(); }

    /// Full segmentation path for task k, returning logits.
    Tensor<T> segment(std::size_t k, const Tensor<T>& x) const {
        return forward_head(k, fuse(forward_shared(x), forward_private(k, x)));
    }

    ParameterList<T> shared_parameters() const {
        ParameterList<T> p;
        shared_.collect(p, "shared");
        return p;
    }
    ParameterList<T> private_parameters(std::size_t k) const {
        check_task(k);
        ParameterList<T> p;
        privates_[k].collect(p, "private." + std::to_string(k));
        return p;
    }
    ParameterList<T> head_parameters(std::size_t k) const {
        check_task(k);
        ParameterList<T> p;
        heads_[k].collect(p, "head." + std::to_string(k));
        return p;
    }
    ParameterList<T> discriminator_parameters() const {
        ParameterList<T> p;
        discriminator_.collect(p, "discriminator");
        return p;
    }

    ParameterList<T> parameters() const {
        ParameterList<T> p = shared_parameters();
        for (std::size_t k = 0; k < task_count(); ++k) {
            auto a = private_parameters(k);
            auto b = head_parameters(k);
            p.insert(p.end(), a.begin(), a.end());
            p.insert(p.end(), b.begin(), b.end());
        }
        auto d = discriminator_parameters();
        p.insert(p.end(), d.begin(), d.end());
        return p;
    }

    /// Main-step parameters for task k: shared, private k, head k.
    ParameterList<T> task_parameters(std::size_t k) const {
        ParameterList<T> p = shared_parameters();
        auto a = private_parameters(k);
        auto b = head_parameters(k);
        p.insert(p.end(), a.begin(), a.end());
        p.insert(p.end(), b.begin(), b.end());
        return p;
    }

private:
    void check_task(std::size_t k) const {
        if (k >= privates_.size()) {
            throw ContractError("task index " + std::to_string(k) + " out of range (" +
                                std::to_string(privates_.size()) + " tasks)");
        }
    }

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.height || x.dim(3) != cfg_.width) {
            throw ShapeError("model input " + num::shape_str(x.shape()) + " expected N x 1 x " +
                             std::to_string(cfg_.height) + " x " + std::to_string(cfg_.width));
        }
    }

    ModelConfig cfg_;
    SharedModule<T> shared_;
    std::vector<PrivateModule<T>> privates_;
    std::vector<TaskHead<T>> heads_;
    Discriminator<T> discriminator_;
    int frozen_through_ = -1;
};

}  // namespace aclseg::model
