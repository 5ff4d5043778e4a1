#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcarch/errors.hpp"

namespace pcarch {

struct TensorDims {
    std::uint32_t n = 1;  // batch
    std::uint32_t h = 1;
    std::uint32_t w = 1;
    std::uint32_t c = 1;  // channels (filters of the producing layer)

    std::size_t count() const noexcept {
        return std::size_t{n} * std::size_t{h} * std::size_t{w} * std::size_t{c};
    }
    std::size_t positions() const noexcept { return std::size_t{n} * h * w; }

    friend bool operator==(const TensorDims&, const TensorDims&) = default;
};

// Raw per-layer activation capture, N x H x W x C, channel fastest.
struct ActivationTensor {
    std::uint32_t layer_id = 0;
    TensorDims dims;
    std::vector<float> data;

    float at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
        return data[((n * dims.h + h) * dims.w + w) * dims.c + c];
    }

    // Throws if dims or payload violate the tensor invariants.
    void validate() const {
        if (dims.n == 0 || dims.h == 0 || dims.w == 0 || dims.c == 0)
            throw DimensionError("activation tensor of layer " + std::to_string(layer_id) +
                                 " has a zero dimension");
        if (data.size() != dims.count())
            throw DimensionError("activation tensor of layer " + std::to_string(layer_id) +
                                 ": payload has " + std::to_string(data.size()) +
                                 " values, dims require " + std::to_string(dims.count()));
        for (std::size_t i = 0; i < data.size(); ++i)
            if (!std::isfinite(data[i]))
                throw DataError("activation tensor of layer " + std::to_string(layer_id) +
                                " has a non-finite value at index " + std::to_string(i));
    }
};

// D x M matrix of PCA samples: one row per spatial position per image.
struct SampleMatrix {
    std::size_t d = 0;
    std::size_t m = 0;
    std::vector<float> data;

    std::span<const float> row(std::size_t r) const { return {data.data() + r * m, m}; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * m + c]; }
};

}  // namespace pcarch
