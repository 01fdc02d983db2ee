#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/data/benchmark.hpp"
#include "aclseg/data/blob.hpp"
#include "aclseg/numerics/tensor.hpp"

namespace aclseg::data {

/// Eagerly loaded, read-only benchmark. Safe to share between readers.
struct Dataset {
    DatasetManifest manifest;
    std::vector<std::vector<float>> images;                                   // by sample id
    std::vector<std::array<std::vector<std::uint8_t>, kNumClasses>> masks;    // by sample id, class_id - 1

    std::size_t height() const { return manifest.height; }
    std::size_t width() const { return manifest.width; }
    std::size_t pixels() const { return manifest.height * manifest.width; }

    const std::vector<std::uint8_t>& mask(std::size_t sample, int class_id) const {
        return masks.at(sample).at(static_cast<std::size_t>(class_id - 1));
    }
};

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw IoError("cannot open dataset manifest " + manifest_path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    Dataset ds;
    try {
        ds.manifest = DatasetManifest::from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError("incomplete manifest " + manifest_path.string() + ": " + e.what());
    }
    validate_geometry(ds.manifest.height, ds.manifest.width);
    const auto root = manifest_path.parent_path() / "samples";
    const std::size_t n = ds.manifest.sample_count();
    ds.images.resize(n);
    ds.masks.resize(n);

    auto load_checked = [&](const std::string& name) {
        auto bytes = read_file(root / name);
        const auto it = ds.manifest.checksums.find(name);
        if (it == ds.manifest.checksums.end()) throw CorruptionError("no checksum recorded for " + name);
        char buf[16];
        std::snprintf(buf, sizeof buf, "%08x", crc32_of(bytes));
        const auto hdr = decode_header(bytes, name);
        if (it->get<std::string>() != buf) throw CorruptionError("checksum mismatch in " + name);
        if (hdr.height != ds.manifest.height || hdr.width != ds.manifest.width) {
            throw CorruptionError("sample size in " + name + " disagrees with manifest");
        }
        return bytes;
    };
    for (std::size_t idx = 0; idx < n; ++idx) {
        ds.images[idx] = decode_image(load_checked(image_file_name(idx)), image_file_name(idx));
        for (int k = 1; k <= kNumClasses; ++k) {
            ds.masks[idx][static_cast<std::size_t>(k - 1)] =
                decode_mask(load_checked(mask_file_name(idx, k)), mask_file_name(idx, k));
        }
    }
    return ds;
}

struct Split {
    enum class Kind { train, val, test };
    Kind kind;
    int class_id;  // which mask the batches carry; for train also the subset owner

    static Split train(int k) { return {Kind::train, k}; }
    static Split val(int k) { return {Kind::val, k}; }
    static Split test(int k) { return {Kind::test, k}; }
};

inline const std::vector<std::size_t>& split_indices(const Dataset& ds, const Split& split) {
    switch (split.kind) {
        case Split::Kind::train:
            task_spec(split.class_id);
            return ds.manifest.train[static_cast<std::size_t>(split.class_id - 1)];
        case Split::Kind::val:
            return ds.manifest.val;
        case Split::Kind::test:
            return ds.manifest.test;
    }
    throw ContractError("unknown split kind");
}

template <typename T>
struct Batch {
    num::Tensor<T> images;  // N×1×H×W
    num::Tensor<T> masks;   // N×1×H×W, values in {0,1}
    int task_label = 0;     // class id the masks belong to
    std::vector<std::size_t> indices;
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices, int class_id) {
    const std::size_t n = indices.size(), px = ds.pixels();
    num::Buffer<T> img(n * px), msk(n * px);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& src = ds.images.at(indices[i]);
        const auto& m = ds.mask(indices[i], class_id);
        std::copy(src.begin(), src.end(), img.begin() + static_cast<std::ptrdiff_t>(i * px));
        std::copy(m.begin(), m.end(), msk.begin() + static_cast<std::ptrdiff_t>(i * px));
    }
    const num::Shape shape{n, 1, ds.height(), ds.width()};
    return {num::Tensor<T>(shape, std::move(img)), num::Tensor<T>(shape, std::move(msk)), class_id,
            std::vector<std::size_t>(indices.begin(), indices.end())};
}

/// One epoch over a split. Batches are materialized on access; the order is
/// a seed-determined permutation when a shuffle seed is given.
template <typename T>
class BatchPlan {
public:
    BatchPlan(const Dataset& ds, Split split, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed)
        : ds_(&ds), split_(split), batch_size_(batch_size) {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        order_ = split_indices(ds, split);
        if (shuffle_seed) {
            num::Rng rng(*shuffle_seed);
            std::shuffle(order_.begin(), order_.end(), rng);
        }
    }

    std::size_t size() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
    bool empty() const { return order_.empty(); }
    const std::vector<std::size_t>& order() const { return order_; }

    Batch<T> operator[](std::size_t b) const {
        const std::size_t begin = b * batch_size_;
        const std::size_t end = std::min(order_.size(), begin + batch_size_);
        return make_batch<T>(*ds_, std::span<const std::size_t>(order_).subspan(begin, end - begin), split_.class_id);
    }

    class iterator {
    public:
        iterator(const BatchPlan* plan, std::size_t pos) : plan_(plan), pos_(pos) {}
        Batch<T> operator*() const { return (*plan_)[pos_]; }
        iterator& operator++() {
            ++pos_;
            return *this;
        }
        bool operator==(const iterator& o) const { return pos_ == o.pos_; }

    private:
        const BatchPlan* plan_;
        std::size_t pos_;
    };

    iterator begin() const { return {this, 0}; }
    iterator end() const { return {this, size()}; }

private:
    const Dataset* ds_;
    Split split_;
    std::size_t batch_size_;
    std::vector<std::size_t> order_;
};

template <typename T = float>
BatchPlan<T> batches(const Dataset& ds, Split split, std::size_t batch_size,
                     std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
    return BatchPlan<T>(ds, split, batch_size, shuffle_seed);
}

}  // namespace aclseg::data
