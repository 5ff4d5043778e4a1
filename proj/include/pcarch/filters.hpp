#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pcarch/errors.hpp"

namespace pcarch {

// The filters of one conv layer, each in_channels x kernel x kernel.
struct FilterBank {
    std::size_t count = 0;
    std::size_t in_channels = 0;
    std::size_t kernel = 3;
    std::vector<double> data;

    FilterBank() = default;
    FilterBank(std::size_t count_, std::size_t in_channels_, std::size_t kernel_ = 3)
        : count(count_), in_channels(in_channels_), kernel(kernel_),
          data(count_ * in_channels_ * kernel_ * kernel_, 0.0) {}

    std::size_t filter_size() const noexcept { return in_channels * kernel * kernel; }

    std::span<double> filter(std::size_t i) { return {data.data() + i * filter_size(), filter_size()}; }
    std::span<const double> filter(std::size_t i) const {
        return {data.data() + i * filter_size(), filter_size()};
    }

    bool same_shape(const FilterBank& o) const noexcept {
        return count == o.count && in_channels == o.in_channels && kernel == o.kernel;
    }
};

}  // namespace pcarch
