#pragma once

// Labelled image sets: the CIFAR-10 binary loader and a synthetic desk-scale
// generator with the same layout.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "pcarch/errors.hpp"

namespace pcarch {

/// Images stored N x H x W x C (channel fastest), labels in [0, classes).
struct Dataset {
    std::size_t h = 0, w = 0, c = 0;
    std::size_t classes = 10;
    std::vector<float> images;
    std::vector<std::uint32_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_size() const noexcept { return h * w * c; }
    std::span<const float> image(std::size_t i) const {
        return {images.data() + i * image_size(), image_size()};
    }
};

/// Copies the listed samples into a new dataset.
inline Dataset select(const Dataset& d, const std::vector<std::size_t>& idx) {
    Dataset out{d.h, d.w, d.c, d.classes, {}, {}};
    out.images.reserve(idx.size() * d.image_size());
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) {
        auto img = d.image(i);
        out.images.insert(out.images.end(), img.begin(), img.end());
        out.labels.push_back(d.labels[i]);
    }
    return out;
}

inline Dataset head(const Dataset& d, std::size_t k) {
    std::vector<std::size_t> idx(std::min(k, d.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return select(d, idx);
}

struct Normalization {
    std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
    std::array<float, 3> stddev{0.2470f, 0.2435f, 0.2616f};
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batches: per record one label byte then 1024 R, 1024 G and
/// 1024 B bytes, each plane row-major 32x32. `subset` = 0 reads every record.
inline Dataset load_cifar_binary(const std::filesystem::path& path, std::size_t subset = 0,
                                 const Normalization& norm = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open CIFAR file " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecordBytes != 0)
        throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                          " is not a multiple of 3073; truncated record at byte offset " +
                          std::to_string(bytes.size() - bytes.size() % kCifarRecordBytes));
    std::size_t records = bytes.size() / kCifarRecordBytes;
    if (subset > 0) records = std::min(records, subset);

    Dataset d{32, 32, 3, 10, std::vector<float>(records * 3072), std::vector<std::uint32_t>(records)};
    for (std::size_t r = 0; r < records; ++r) {
        const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
        if (rec[0] >= 10)
            throw DataError(path.string() + ": label " + std::to_string(rec[0]) + " at byte offset " +
                            std::to_string(r * kCifarRecordBytes) + " is out of range");
        d.labels[r] = rec[0];
        float* img = d.images.data() + r * 3072;
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t p = 0; p < 1024; ++p) {
                const float v = static_cast<float>(rec[1 + ch * 1024 + p]) / 255.0f;
                img[p * 3 + ch] = (v - norm.mean[ch]) / norm.stddev[ch];
            }
    }
    return d;
}

struct SyntheticSpec {
    std::size_t size = 16;     // square image side
    std::size_t classes = 10;  // at most 10: 5 orientations x 2 frequencies
    float noise = 1.5f;
};

/// Oriented colour gratings with random phase, contrast and per-channel
/// offset, plus white noise. Class k fixes orientation and spatial frequency.
inline Dataset make_synthetic(std::size_t count, std::uint64_t seed, const SyntheticSpec& spec = {}) {
    if (spec.classes == 0 || spec.classes > 10)
        throw ArgumentError("synthetic data supports 1..10 classes");
    const std::size_t s = spec.size;
    Dataset d{s, s, 3, spec.classes, std::vector<float>(count * s * s * 3), std::vector<std::uint32_t>(count)};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    constexpr float pi = std::numbers::pi_v<float>;
    const std::array<float, 3> tint{1.0f, 0.6f, -0.4f};
    for (std::size_t i = 0; i < count; ++i) {
        const auto label = static_cast<std::uint32_t>(i % spec.classes);
        d.labels[i] = label;
        const float theta = static_cast<float>(label % 5) * pi / 5.0f + 0.15f * (unit(rng) - 0.5f);
        const float freq = (label < 5 ? 2.0f : 3.5f) / static_cast<float>(s);
        const float phase = 2.0f * pi * unit(rng);
        const float contrast = 0.7f + 0.6f * unit(rng);
        std::array<float, 3> offset{};
        for (auto& o : offset) o = 0.3f * gauss(rng);
        float* img = d.images.data() + i * s * s * 3;
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                const float u = static_cast<float>(x) * std::cos(theta) + static_cast<float>(y) * std::sin(theta);
                const float g = contrast * std::sin(2.0f * pi * freq * u + phase);
                for (std::size_t ch = 0; ch < 3; ++ch)
                    img[(y * s + x) * 3 + ch] = tint[ch] * g + offset[ch] + spec.noise * gauss(rng);
            }
    }
    return d;
}

/// Writes images in CIFAR binary layout after undoing `norm`; pixel values
/// are clamped to [0, 255]. Only 32x32x3 datasets are representable.
inline void write_cifar_binary(const Dataset& d, const std::filesystem::path& path,
                               const Normalization& norm = {}) {
    if (d.h != 32 || d.w != 32 || d.c != 3) throw ArgumentError("CIFAR records are 32x32x3");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    std::vector<unsigned char> rec(kCifarRecordBytes);
    for (std::size_t i = 0; i < d.size(); ++i) {
        rec[0] = static_cast<unsigned char>(d.labels[i]);
        auto img = d.image(i);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t p = 0; p < 1024; ++p) {
                const float v = (img[p * 3 + ch] * norm.stddev[ch] + norm.mean[ch]) * 255.0f;
                rec[1 + ch * 1024 + p] = static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
            }
        out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    }
}

}  // namespace pcarch
