#pragma once

// NetParams checkpoints: "NETP" | u32 version | u32 tensor count | u64 value
// count | f32 LE tensors in token order. A JSON manifest (<path>.json) holds
// the config and every tensor's name, shape and byte offset.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcarch/arch.hpp"
#include "pcarch/errors.hpp"
#include "pcarch/ingest.hpp"
#include "pcarch/net.hpp"

namespace pcarch {

inline constexpr std::array<char, 4> kCheckpointMagic{'N', 'E', 'T', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 20;

namespace detail {

template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
    for (std::size_t i = 0; i < p.convs.size(); ++i) {
        auto& c = p.convs[i];
        const std::string prefix = "conv" + std::to_string(i) + ".";
        fn(prefix + "weight", std::vector<std::size_t>{c.out_channels, c.in_channels, 3, 3}, c.weight);
        fn(prefix + "bias", std::vector<std::size_t>{c.out_channels}, c.bias);
        if (p.config.batch_norm) {
            fn(prefix + "bn_scale", std::vector<std::size_t>{c.out_channels}, c.bn_scale);
            fn(prefix + "bn_shift", std::vector<std::size_t>{c.out_channels}, c.bn_shift);
            fn(prefix + "running_mean", std::vector<std::size_t>{c.out_channels}, c.running_mean);
            fn(prefix + "running_var", std::vector<std::size_t>{c.out_channels}, c.running_var);
        }
    }
    const std::size_t classes = p.config.classes;
    fn(std::string("classifier.weight"), std::vector<std::size_t>{classes, p.dense_weight.size() / classes},
       p.dense_weight);
    fn(std::string("classifier.bias"), std::vector<std::size_t>{classes}, p.dense_bias);
}

inline std::filesystem::path manifest_path(const std::filesystem::path& ckpt) {
    auto m = ckpt;
    m += ".json";
    return m;
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const NetParams<Real>& p, const std::filesystem::path& path) {
    nlohmann::json manifest;
    manifest["format"] = "NETP";
    manifest["version"] = kCheckpointVersion;
    manifest["config"] = to_json(p.config);
    manifest["tensors"] = nlohmann::json::array();
    std::vector<float> payload;
    std::uint32_t tensors = 0;
    detail::for_each_tensor(p, [&](const std::string& name, const std::vector<std::size_t>& shape,
                                   const std::vector<Real>& values) {
        manifest["tensors"].push_back({{"name", name},
                                       {"shape", shape},
                                       {"offset", kCheckpointHeaderBytes + payload.size() * sizeof(float)}});
        for (Real v : values) payload.push_back(static_cast<float>(v));
        ++tensors;
    });

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic.data(), 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, tensors);
    const std::uint64_t count = payload.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof count);
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
    if (!out) throw FormatError("failed writing checkpoint " + path.string());

    std::ofstream mf(detail::manifest_path(path));
    if (!mf) throw FormatError("cannot write manifest for " + path.string());
    mf << manifest.dump(2) << '\n';
}

/// Loads a checkpoint, checking the binary against its manifest and the
/// manifest's config against the stored tensor shapes.
template <typename Real>
NetParams<Real> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream mf(detail::manifest_path(path));
    if (!mf) throw FormatError("missing checkpoint manifest " + detail::manifest_path(path).string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(detail::manifest_path(path).string() + ": " + e.what());
    }
    NetParams<Real> p = build<Real>(arch_from_json(manifest.at("config")), 0);

    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    std::array<unsigned char, kCheckpointHeaderBytes> hdr{};
    in.read(reinterpret_cast<char*>(hdr.data()), hdr.size());
    if (static_cast<std::size_t>(in.gcount()) < hdr.size())
        throw LengthError(path.string() + ": truncated checkpoint header");
    if (std::memcmp(hdr.data(), kCheckpointMagic.data(), 4) != 0)
        throw FormatError(path.string() + ": bad magic at offset 0");
    if (detail::get_u32(hdr.data() + 4) != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version at offset 4");
    std::uint64_t count;
    std::memcpy(&count, hdr.data() + 12, sizeof count);

    std::size_t expected = 0;
    std::uint32_t tensors = 0;
    detail::for_each_tensor(p, [&](const std::string&, const std::vector<std::size_t>&, std::vector<Real>& v) {
        expected += v.size();
        ++tensors;
    });
    if (detail::get_u32(hdr.data() + 8) != tensors || count != expected)
        throw ConsistencyError(path.string() + ": checkpoint holds " + std::to_string(count) +
                               " values, config requires " + std::to_string(expected));
    const auto& listed = manifest.at("tensors");
    if (!listed.is_array() || listed.size() != tensors)
        throw ConsistencyError(path.string() + ": manifest tensor list does not match config");

    std::vector<float> payload(expected);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(expected * 4));
    if (static_cast<std::size_t>(in.gcount()) < expected * 4)
        throw LengthError(path.string() + ": payload truncated, expected " + std::to_string(expected * 4) +
                          " bytes, got " + std::to_string(in.gcount()));
    std::size_t at = 0, index = 0;
    detail::for_each_tensor(p, [&](const std::string& name, const std::vector<std::size_t>& shape,
                                   std::vector<Real>& v) {
        const auto& entry = listed[index++];
        if (entry.at("name").get<std::string>() != name ||
            entry.at("shape").get<std::vector<std::size_t>>() != shape)
            throw ConsistencyError(path.string() + ": manifest entry " + entry.dump() + " does not match " + name);
        for (auto& x : v) {
            const float f = payload[at++];
            if (!std::isfinite(f)) throw DataError(path.string() + ": non-finite value in " + name);
            x = static_cast<Real>(f);
        }
    });
    return p;
}

}  // namespace pcarch
