#pragma once

// Analytic parameter and multiply-accumulate counts for an ArchConfig.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcarch/arch.hpp"
#include "pcarch/errors.hpp"

namespace pcarch {

struct LayerCost {
    std::string name;  // "conv0", "conv1", ..., "classifier"
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
};

struct CostReport {
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
    std::vector<LayerCost> layers;
};

/// Per conv (3x3, c_in -> c_out at HxW): params c_out*(9*c_in + 1) plus 2*c_out
/// for batch-norm scale/shift; macs H*W*c_out*9*c_in. The dense classifier
/// adds flat*classes + classes params and flat*classes macs. Pools are free.
inline CostReport count(const ArchConfig& cfg) {
    const Geometry g = geometry(cfg);
    CostReport r;
    for (std::size_t i = 0; i < g.convs.size(); ++i) {
        const auto& c = g.convs[i];
        LayerCost lc{"conv" + std::to_string(i), 0, 0};
        lc.params = c.out_channels * (9 * c.in_channels + 1) + (cfg.batch_norm ? 2 * c.out_channels : 0);
        lc.macs = std::uint64_t{c.h} * c.w * c.out_channels * 9 * c.in_channels;
        r.layers.push_back(lc);
    }
    const std::uint64_t flat = g.flat_dim();
    r.layers.push_back({"classifier", flat * cfg.classes + cfg.classes, flat * cfg.classes});
    for (const auto& l : r.layers) {
        r.params += l.params;
        r.macs += l.macs;
    }
    return r;
}

struct CostRatio {
    double macs = 0.0;
    double params = 0.0;
};

/// Elementwise a / b.
inline CostRatio ratio(const CostReport& a, const CostReport& b) {
    if (b.macs == 0 || b.params == 0) throw ArgumentError("cost ratio against a zero baseline");
    return {static_cast<double>(a.macs) / static_cast<double>(b.macs),
            static_cast<double>(a.params) / static_cast<double>(b.params)};
}

inline std::string format_ratio(double r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2fX", r);
    return buf;
}

inline nlohmann::json to_json(const CostReport& r) {
    nlohmann::json j;
    j["params"] = r.params;
    j["macs"] = r.macs;
    auto layers = nlohmann::json::array();
    for (const auto& l : r.layers) layers.push_back({{"layer", l.name}, {"params", l.params}, {"macs", l.macs}});
    j["layers"] = layers;
    return j;
}

inline nlohmann::json to_json(const CostRatio& r) {
    return {{"macs", r.macs}, {"params", r.params}, {"macs_text", format_ratio(r.macs)},
            {"params_text", format_ratio(r.params)}};
}

}  // namespace pcarch
