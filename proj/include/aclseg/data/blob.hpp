#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "aclseg/errors.hpp"

namespace aclseg::data {

// Per-sample binary blob: 16-byte little-endian header followed by the raw
// payload.
//
//   offset 0  char[4] magic "ACLS"
//   offset 4  u16     format version
//   offset 6  u16     height
//   offset 8  u16     width
//   offset 10 u16     channels
//   offset 12 u16     dtype tag (0 = f32, 1 = u8)
//   offset 14 u16     reserved (zero)
inline constexpr std::array<char, 4> kBlobMagic{'A', 'C', 'L', 'S'};
inline constexpr std::uint16_t kBlobVersion = 1;
inline constexpr std::size_t kBlobHeaderSize = 16;

enum class DType : std::uint16_t { f32 = 0, u8 = 1 };

struct BlobHeader {
    std::uint16_t version = kBlobVersion;
    std::uint16_t height = 0;
    std::uint16_t width = 0;
    std::uint16_t channels = 1;
    DType dtype = DType::f32;

    std::size_t payload_bytes() const {
        const std::size_t elem = dtype == DType::f32 ? 4 : 1;
        return std::size_t{height} * width * channels * elem;
    }
};

namespace detail {

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>(v >> 8));
}

inline std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_f32(std::vector<unsigned char>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

inline std::vector<unsigned char> encode_header(const BlobHeader& h) {
    std::vector<unsigned char> out(kBlobMagic.begin(), kBlobMagic.end());
    detail::put_u16(out, h.version);
    detail::put_u16(out, h.height);
    detail::put_u16(out, h.width);
    detail::put_u16(out, h.channels);
    detail::put_u16(out, static_cast<std::uint16_t>(h.dtype));
    detail::put_u16(out, 0);
    return out;
}

inline std::vector<unsigned char> encode_image(std::span<const float> pixels, std::uint16_t h, std::uint16_t w) {
    auto out = encode_header({kBlobVersion, h, w, 1, DType::f32});
    out.reserve(out.size() + pixels.size() * 4);
    for (float v : pixels) detail::put_f32(out, v);
    return out;
}

inline std::vector<unsigned char> encode_mask(std::span<const std::uint8_t> mask, std::uint16_t h, std::uint16_t w) {
    auto out = encode_header({kBlobVersion, h, w, 1, DType::u8});
    out.insert(out.end(), mask.begin(), mask.end());
    return out;
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CorruptionError("missing file: " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Validates the header and payload length; throws CorruptionError naming
/// `label` on any mismatch.
inline BlobHeader decode_header(std::span<const unsigned char> bytes, const std::string& label) {
    if (bytes.size() < kBlobHeaderSize || !std::equal(kBlobMagic.begin(), kBlobMagic.end(), bytes.begin())) {
        throw CorruptionError("bad sample header in " + label);
    }
    BlobHeader h;
    h.version = detail::get_u16(bytes.data() + 4);
    h.height = detail::get_u16(bytes.data() + 6);
    h.width = detail::get_u16(bytes.data() + 8);
    h.channels = detail::get_u16(bytes.data() + 10);
    const std::uint16_t tag = detail::get_u16(bytes.data() + 12);
    if (h.version != kBlobVersion) {
        throw VersionError("unsupported sample version " + std::to_string(h.version) + " in " + label);
    }
    if (tag > 1) throw CorruptionError("unknown dtype tag in " + label);
    h.dtype = static_cast<DType>(tag);
    if (bytes.size() != kBlobHeaderSize + h.payload_bytes()) {
        throw CorruptionError("truncated or oversized payload in " + label + " (" + std::to_string(bytes.size()) +
                              " bytes)");
    }
    return h;
}

inline std::vector<float> decode_image(std::span<const unsigned char> bytes, const std::string& label) {
    const auto h = decode_header(bytes, label);
    if (h.dtype != DType::f32) throw CorruptionError("expected f32 image in " + label);
    std::vector<float> out(std::size_t{h.height} * h.width * h.channels);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::get_f32(bytes.data() + kBlobHeaderSize + 4 * i);
    return out;
}

inline std::vector<std::uint8_t> decode_mask(std::span<const unsigned char> bytes, const std::string& label) {
    const auto h = decode_header(bytes, label);
    if (h.dtype != DType::u8) throw CorruptionError("expected u8 mask in " + label);
    return {bytes.begin() + kBlobHeaderSize, bytes.end()};
}

}  // namespace aclseg::data
