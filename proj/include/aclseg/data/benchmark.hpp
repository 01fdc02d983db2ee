#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclseg/data/blob.hpp"
#include "aclseg/errors.hpp"
#include "aclseg/numerics/init.hpp"

namespace aclseg::data {

inline constexpr int kNumClasses = 5;
inline constexpr int kManifestVersion = 1;

/// Geometry of one synthetic structure in normalized [0,1] image coordinates.
struct TaskSpec {
    int class_id;
    std::string name;
    double center_x, center_y;
    double center_jitter;
    double axis_x, axis_y;  // semi-axes
    double axis_jitter;     // relative
    double rotation_jitter;  // radians
    double intensity;
    double rarity;  // expected positive-pixel fraction
};

/// The five-organ roster. Draw order is lungs, heart, cord, oesophagus so
/// later structures occlude earlier ones and the masks stay disjoint.
inline const std::array<TaskSpec, kNumClasses>& task_specs() {
    constexpr double pi = std::numbers::pi;
    static const std::array<TaskSpec, kNumClasses> specs{{
        {1, "cord", 0.50, 0.80, 0.02, 0.045, 0.045, 0.10, 0.0, 0.90, pi * 0.045 * 0.045},
        {2, "right_lung", 0.29, 0.45, 0.025, 0.13, 0.22, 0.10, 0.15, 0.06, pi * 0.13 * 0.22},
        {3, "left_lung", 0.71, 0.45, 0.025, 0.13, 0.22, 0.10, 0.15, 0.06, pi * 0.13 * 0.22},
        {4, "heart", 0.55, 0.56, 0.025, 0.11, 0.10, 0.10, 0.4, 0.58, pi * 0.11 * 0.10},
        {5, "oesophagus", 0.53, 0.70, 0.01, 0.018, 0.028, 0.10, 0.3, 0.42, pi * 0.018 * 0.028},
    }};
    return specs;
}

inline const TaskSpec& task_spec(int class_id) {
    if (class_id < 1 || class_id > kNumClasses) throw ConfigError("unknown class id " + std::to_string(class_id));
    return task_specs()[static_cast<std::size_t>(class_id - 1)];
}

inline int class_id_from_name(const std::string& name) {
    for (const auto& s : task_specs())
        if (s.name == name) return s.class_id;
    throw ConfigError("unknown class name '" + name + "'");
}

struct Sample {
    std::size_t height = 0, width = 0;
    std::vector<float> image;                               // values in [0,1]
    std::array<std::vector<std::uint8_t>, kNumClasses> masks;  // indexed by class_id - 1
};

struct DatasetManifest {
    int version = kManifestVersion;
    std::uint64_t seed = 0;
    std::size_t height = 0, width = 0;
    std::array<std::vector<std::size_t>, kNumClasses> train;  // indexed by class_id - 1
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
    std::size_t train_per_class = 0;
    nlohmann::json checksums = nlohmann::json::object();  // file name -> crc32 hex

    std::size_t sample_count() const { return train_per_class * kNumClasses + val.size() + test.size(); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "aclseg-dataset";
        j["version"] = version;
        j["seed"] = seed;
        j["image_size"] = {height, width};
        nlohmann::json classes = nlohmann::json::array();
        for (const auto& s : task_specs()) classes.push_back({{"id", s.class_id}, {"name", s.name}});
        j["classes"] = classes;
        nlohmann::json train_j = nlohmann::json::object();
        for (int k = 1; k <= kNumClasses; ++k) train_j[std::to_string(k)] = train[static_cast<std::size_t>(k - 1)];
        j["train"] = train_j;
        j["val"] = val;
        j["test"] = test;
        j["counts"] = {{"train_per_class", train_per_class}, {"val", val.size()}, {"test", test.size()}};
        j["checksums"] = checksums;
        return j;
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        DatasetManifest m;
        m.version = j.at("version").get<int>();
        if (m.version != kManifestVersion) {
            throw VersionError("unsupported dataset manifest version " + std::to_string(m.version));
        }
        m.seed = j.at("seed").get<std::uint64_t>();
        m.height = j.at("image_size").at(0).get<std::size_t>();
        m.width = j.at("image_size").at(1).get<std::size_t>();
        for (int k = 1; k <= kNumClasses; ++k)
            m.train[static_cast<std::size_t>(k - 1)] = j.at("train").at(std::to_string(k)).get<std::vector<std::size_t>>();
        m.val = j.at("val").get<std::vector<std::size_t>>();
        m.test = j.at("test").get<std::vector<std::size_t>>();
        m.train_per_class = j.at("counts").at("train_per_class").get<std::size_t>();
        m.checksums = j.at("checksums");
        return m;
    }
};

inline std::string sample_stem(std::size_t index) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%05zu", index);
    return buf;
}

inline std::string image_file_name(std::size_t index) { return sample_stem(index) + ".img"; }
inline std::string mask_file_name(std::size_t index, int class_id) {
    return sample_stem(index) + ".msk" + std::to_string(class_id);
}

namespace detail {

// Separable [1 4 6 4 1]/16 blur, edges clamped.
inline void blur(std::vector<double>& img, std::size_t h, std::size_t w) {
    static constexpr double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
    std::vector<double> tmp(img.size());
    auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1)); };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int d = -2; d <= 2; ++d) acc += k[d + 2] * img[y * w + clampi(static_cast<long>(x) + d, w)];
            tmp[y * w + x] = acc;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int d = -2; d <= 2; ++d) acc += k[d + 2] * tmp[clampi(static_cast<long>(y) + d, h) * w + x];
            img[y * w + x] = acc;
        }
}

struct Ellipse {
    double cx, cy, ax, ay, theta;
    double wobble = 0, phase = 0;  // radial modulation for blob-like outlines

    bool contains(double u, double v) const {
        const double du = u - cx, dv = v - cy;
        const double c = std::cos(theta), s = std::sin(theta);
        const double x = (c * du + s * dv) / ax;
        const double y = (-s * du + c * dv) / ay;
        const double r = std::sqrt(x * x + y * y);
        const double limit = 1.0 + wobble * std::sin(3.0 * std::atan2(y, x) + phase);
        return r <= limit;
    }
};

inline Ellipse jittered(const TaskSpec& spec, num::Rng& rng, double dx = 0, double dy = 0) {
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    Ellipse e;
    e.cx = spec.center_x + dx + spec.center_jitter * unit(rng);
    e.cy = spec.center_y + dy + spec.center_jitter * unit(rng);
    e.ax = spec.axis_x * (1.0 + spec.axis_jitter * unit(rng));
    e.ay = spec.axis_y * (1.0 + spec.axis_jitter * unit(rng));
    e.theta = spec.rotation_jitter * unit(rng);
    return e;
}

}  // namespace detail

/// Renders sample `index` of the benchmark seeded by `seed`. Pure function of
/// its arguments.
inline Sample render_sample(std::uint64_t seed, std::size_t index, std::size_t height, std::size_t width) {
    num::Rng rng(num::derive_seed(seed, "sample", index));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto& specs = task_specs();

    detail::Ellipse body{0.5 + 0.015 * unit(rng), 0.55 + 0.015 * unit(rng), 0.44 * (1 + 0.04 * unit(rng)),
                         0.36 * (1 + 0.04 * unit(rng)), 0.05 * unit(rng)};
    std::array<detail::Ellipse, kNumClasses> organ;
    // A shared anatomical shift keeps the organs in plausible relative positions.
    const double shift_x = 0.02 * unit(rng), shift_y = 0.02 * unit(rng);
    for (std::size_t k = 0; k < 4; ++k) organ[k] = detail::jittered(specs[k], rng, shift_x, shift_y);
    organ[3].wobble = 0.08;
    organ[3].phase = std::numbers::pi * unit(rng);
    // The oesophagus sits just above and beside the cord.
    organ[4] = detail::jittered(specs[4], rng, 0, 0);
    organ[4].cx = organ[0].cx + 0.03 + 0.01 * unit(rng);
    organ[4].cy = organ[0].cy - 0.085 + 0.01 * unit(rng);

    std::vector<double> noise(height * width);
    for (auto& v : noise) v = gauss(rng);
    detail::blur(noise, height, width);
    detail::blur(noise, height, width);

    static constexpr std::array<std::size_t, kNumClasses> draw_order{1, 2, 3, 0, 4};
    Sample s;
    s.height = height;
    s.width = width;
    s.image.resize(height * width);
    for (auto& m : s.masks) m.assign(height * width, 0);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(width);
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(height);
            double value = body.contains(u, v) ? 0.30 : 0.02;
            int label = 0;
            for (std::size_t k : draw_order) {
                if (organ[k].contains(u, v)) {
                    value = specs[k].intensity;
                    label = specs[k].class_id;
                }
            }
            if (label) s.masks[static_cast<std::size_t>(label - 1)][y * width + x] = 1;
            value += 0.12 * noise[y * width + x] + 0.02 * gauss(rng);
            s.image[y * width + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
        }
    }
    return s;
}

struct BenchmarkCounts {
    std::size_t train_per_class = 40;
    std::size_t val = 16;
    std::size_t test = 48;
};

inline void validate_geometry(std::size_t height, std::size_t width) {
    if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
        throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                          " must be positive and divisible by 16");
    }
    if (height > 65535 || width > 65535) throw ConfigError("image size exceeds the u16 header field");
}

/// Writes the benchmark to `out_dir` and returns its manifest. Output bytes
/// are a pure function of the arguments.
inline DatasetManifest generate_benchmark(std::uint64_t seed, const BenchmarkCounts& counts, std::size_t height,
                                          std::size_t width, const std::filesystem::path& out_dir) {
    validate_geometry(height, width);
    if (counts.train_per_class < 1 || counts.val < 1 || counts.test < 1) {
        throw ConfigError("sample counts must all be >= 1");
    }
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "samples", ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

    DatasetManifest m;
    m.seed = seed;
    m.height = height;
    m.width = width;
    m.train_per_class = counts.train_per_class;
    std::size_t next = 0;
    for (int k = 0; k < kNumClasses; ++k)
        for (std::size_t i = 0; i < counts.train_per_class; ++i) m.train[static_cast<std::size_t>(k)].push_back(next++);
    for (std::size_t i = 0; i < counts.val; ++i) m.val.push_back(next++);
    for (std::size_t i = 0; i < counts.test; ++i) m.test.push_back(next++);

    auto crc_hex = [](std::uint32_t c) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%08x", c);
        return std::string(buf);
    };
    const auto h16 = static_cast<std::uint16_t>(height), w16 = static_cast<std::uint16_t>(width);
    for (std::size_t idx = 0; idx < next; ++idx) {
        const Sample s = render_sample(seed, idx, height, width);
        const auto img = encode_image(s.image, h16, w16);
        write_file(out_dir / "samples" / image_file_name(idx), img);
        m.checksums[image_file_name(idx)] = crc_hex(crc32_of(img));
        for (int k = 1; k <= kNumClasses; ++k) {
            const auto mask = encode_mask(s.masks[static_cast<std::size_t>(k - 1)], h16, w16);
            write_file(out_dir / "samples" / mask_file_name(idx, k), mask);
            m.checksums[mask_file_name(idx, k)] = crc_hex(crc32_of(mask));
        }
    }
    const std::string text = m.to_json().dump(2) + "\n";
    write_file(out_dir / "manifest.json",
               std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
    return m;
}

}  // namespace aclseg::data
