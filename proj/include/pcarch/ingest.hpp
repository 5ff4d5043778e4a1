#pragma once

// Activation capture files and flattening into PCA sample matrices.
//
// .act layout, all integers little-endian:
//   "ACTV" | u32 version=1 | u32 layer_id | u32 N | u32 H | u32 W | u32 C |
//   u32 dtype (1 = f32 LE) | N*H*W*C f32 payload, channel fastest.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <regex>
#include <string>
#include <vector>

#include "pcarch/errors.hpp"
#include "pcarch/tensor.hpp"

namespace pcarch {

static_assert(std::endian::native == std::endian::little,
              "activation and checkpoint I/O assume a little-endian host");

inline constexpr std::array<char, 4> kActivationMagic{'A', 'C', 'T', 'V'};
inline constexpr std::uint32_t kActivationVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;
inline constexpr std::size_t kActivationHeaderBytes = 32;

/// Every spatial position of every image becomes one row; a pure
/// reinterpretation of the channel-fastest payload.
inline SampleMatrix flatten(const ActivationTensor& t) {
    t.validate();
    return SampleMatrix{t.dims.positions(), t.dims.c, t.data};
}

inline SampleMatrix flatten(ActivationTensor&& t) {
    t.validate();
    return SampleMatrix{t.dims.positions(), t.dims.c, std::move(t.data)};
}

/// Mini-batches needed so that samples D = batches*N*H*W reach 100x the
/// channel count.
inline std::size_t required_batches(std::size_t channels, std::size_t height, std::size_t width,
                                    std::size_t batch_size) {
    if (channels == 0 || height == 0 || width == 0 || batch_size == 0)
        throw ArgumentError("required_batches: all inputs must be >= 1");
    const std::size_t need = 100 * channels;
    const std::size_t per_batch = height * width * batch_size;
    return std::max<std::size_t>(1, (need + per_batch - 1) / per_batch);
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

// Bytes left in a seekable stream, or -1 when the stream cannot seek.
inline std::streamoff remaining_bytes(std::istream& in) {
    const auto here = in.tellg();
    if (here < 0) return -1;
    in.seekg(0, std::ios::end);
    const auto end = in.tellg();
    in.seekg(here);
    if (end < 0) return -1;
    return end - here;
}

}  // namespace detail

inline void write_activations(const ActivationTensor& t, std::ostream& out) {
    t.validate();
    out.write(kActivationMagic.data(), kActivationMagic.size());
    detail::put_u32(out, kActivationVersion);
    detail::put_u32(out, t.layer_id);
    detail::put_u32(out, t.dims.n);
    detail::put_u32(out, t.dims.h);
    detail::put_u32(out, t.dims.w);
    detail::put_u32(out, t.dims.c);
    detail::put_u32(out, kDtypeF32);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out) throw FormatError("failed writing activation stream");
}

/// Reads one tensor and requires the stream to end right after its payload.
inline ActivationTensor read_activations(std::istream& in, const std::string& source = "stream") {
    std::array<unsigned char, kActivationHeaderBytes> hdr{};
    in.read(reinterpret_cast<char*>(hdr.data()), hdr.size());
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got < hdr.size())
        throw LengthError(source + ": truncated header, expected " +
                          std::to_string(kActivationHeaderBytes) + " bytes, got " + std::to_string(got));
    if (std::memcmp(hdr.data(), kActivationMagic.data(), 4) != 0)
        throw FormatError(source + ": bad magic at offset 0");
    const std::uint32_t version = detail::get_u32(hdr.data() + 4);
    if (version != kActivationVersion)
        throw FormatError(source + ": unsupported version " + std::to_string(version) + " at offset 4");
    ActivationTensor t;
    t.layer_id = detail::get_u32(hdr.data() + 8);
    t.dims = {detail::get_u32(hdr.data() + 12), detail::get_u32(hdr.data() + 16),
              detail::get_u32(hdr.data() + 20), detail::get_u32(hdr.data() + 24)};
    const std::uint32_t dtype = detail::get_u32(hdr.data() + 28);
    if (dtype != kDtypeF32)
        throw FormatError(source + ": unsupported dtype " + std::to_string(dtype) + " at offset 28");
    if (t.dims.n == 0 || t.dims.h == 0 || t.dims.w == 0 || t.dims.c == 0)
        throw FormatError(source + ": zero dimension in header at offset 12");

    // Four u32 factors fit in 128 bits; reject anything beyond 2^62 bytes up front.
    const unsigned __int128 values = static_cast<unsigned __int128>(t.dims.n) * t.dims.h * t.dims.w * t.dims.c;
    const unsigned __int128 expected128 = values * sizeof(float);
    const std::streamoff remaining = detail::remaining_bytes(in);
    if (expected128 > (static_cast<unsigned __int128>(1) << 62) ||
        (remaining >= 0 && expected128 > static_cast<unsigned __int128>(remaining)))
        throw LengthError(source + ": payload truncated, expected " +
                          std::to_string(static_cast<unsigned long long>(
                              std::min<unsigned __int128>(expected128, ~0ULL))) +
                          " bytes, got " + std::to_string(remaining < 0 ? 0 : remaining));
    const auto expected = static_cast<std::size_t>(expected128);

    t.data.resize(static_cast<std::size_t>(values));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(expected));
    const auto payload = static_cast<std::size_t>(in.gcount());
    if (payload < expected)
        throw LengthError(source + ": payload truncated, expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(payload));
    if (in.peek() != std::char_traits<char>::eof()) {
        const std::streamoff extra = detail::remaining_bytes(in);
        throw LengthError(source + ": payload length mismatch, expected " + std::to_string(expected) +
                          " bytes, got " +
                          (extra >= 0 ? std::to_string(expected + static_cast<std::size_t>(extra))
                                      : std::string("more")));
    }
    for (std::size_t i = 0; i < t.data.size(); ++i)
        if (!std::isfinite(t.data[i]))
            throw DataError(source + ": non-finite value at payload index " + std::to_string(i));
    return t;
}

inline std::string capture_file_name(std::uint32_t layer_id, std::size_t batch) {
    return "layer" + std::to_string(layer_id) + "_batch" + std::to_string(batch) + ".act";
}

inline void write_activations_file(const ActivationTensor& t, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_activations(t, out);
}

inline ActivationTensor read_activations_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_activations(in, path.string());
}

/// Finds `layer<id>_batch<k>.act` files in a directory, grouped by layer id
/// and ordered by batch index.
inline std::map<std::uint32_t, std::vector<std::filesystem::path>> discover_captures(
    const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw ArgumentError("capture directory not found: " + dir.string());
    static const std::regex pattern(R"(layer(\d+)_batch(\d+)\.act)");
    std::map<std::uint32_t, std::map<std::size_t, std::filesystem::path>> found;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        std::smatch m;
        if (!std::regex_match(name, m, pattern)) continue;
        found[static_cast<std::uint32_t>(std::stoul(m[1]))][std::stoul(m[2])] = entry.path();
    }
    std::map<std::uint32_t, std::vector<std::filesystem::path>> out;
    for (auto& [layer, batches] : found)
        for (auto& [k, path] : batches) out[layer].push_back(path);
    return out;
}

}  // namespace pcarch
