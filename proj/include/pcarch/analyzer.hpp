#pragma once

// Per-layer significant dimensions and the width/depth planning built on them.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcarch/arch.hpp"
#include "pcarch/errors.hpp"
#include "pcarch/ingest.hpp"
#include "pcarch/linalg.hpp"
#include "pcarch/profiler.hpp"

namespace pcarch {

inline constexpr double kDefaultThreshold = 0.999;
inline constexpr std::size_t kSamplesPerFeature = 100;

struct LayerAnalysis {
    std::uint32_t layer_id = 0;
    std::size_t m = 0;  // filters
    std::size_t d = 0;  // samples
    std::size_t s = 0;  // significant dimensions
    std::vector<double> curve;
    bool dead = false;
    bool sufficient = true;  // d >= 100 * m
};

struct NetworkAnalysis {
    double threshold = kDefaultThreshold;
    std::vector<LayerAnalysis> layers;

    std::vector<std::size_t> significant_dimensions() const {
        std::vector<std::size_t> s;
        for (const auto& l : layers) s.push_back(l.s);
        return s;
    }
};

/// Spectrum of one layer; thresholds can be applied to it repeatedly.
struct LayerSpectrum {
    std::uint32_t layer_id = 0;
    std::size_t d = 0;
    PcaSpectrum spectrum;
};

inline void check_threshold(double t) {
    if (!(t > 0.0 && t <= 1.0))
        throw ArgumentError("variance threshold must lie in (0, 1], got " + std::to_string(t));
}

inline LayerSpectrum layer_spectrum(const std::vector<ActivationTensor>& captures) {
    if (captures.empty()) throw ArgumentError("analyze_layer: no captures given");
    const auto id = captures.front().layer_id;
    const auto m = captures.front().dims.c;
    CovAccumulator acc(m);
    for (std::size_t k = 0; k < captures.size(); ++k) {
        const auto& t = captures[k];
        if (t.layer_id != id)
            throw ConsistencyError("layer " + std::to_string(id) + ": capture " + std::to_string(k) +
                                   " belongs to layer " + std::to_string(t.layer_id));
        if (t.dims.c != m)
            throw ConsistencyError("layer " + std::to_string(id) + ": capture " + std::to_string(k) + " has " +
                                   std::to_string(t.dims.c) + " channels, expected " + std::to_string(m));
        acc.add(flatten(t), "layer " + std::to_string(id) + " capture " + std::to_string(k));
    }
    return {id, acc.samples(), eigendecompose(acc.finalize())};
}

/// Streams capture files one at a time into the accumulator.
inline LayerSpectrum layer_spectrum(const std::vector<std::filesystem::path>& files) {
    if (files.empty()) throw ArgumentError("analyze_layer: no capture files given");
    std::optional<CovAccumulator> acc;
    std::uint32_t id = 0;
    std::uint32_t m = 0;
    for (const auto& f : files) {
        ActivationTensor t = read_activations_file(f);
        if (!acc) {
            id = t.layer_id;
            m = t.dims.c;
            acc.emplace(m);
        }
        if (t.layer_id != id)
            throw ConsistencyError(f.string() + ": belongs to layer " + std::to_string(t.layer_id) +
                                   ", expected layer " + std::to_string(id));
        if (t.dims.c != m)
            throw ConsistencyError(f.string() + ": layer " + std::to_string(id) + " capture has " +
                                   std::to_string(t.dims.c) + " channels, expected " + std::to_string(m));
        acc->add(flatten(std::move(t)), f.string());
    }
    return {id, acc->samples(), eigendecompose(acc->finalize())};
}

inline LayerAnalysis summarize(const LayerSpectrum& ls, double threshold) {
    check_threshold(threshold);
    LayerAnalysis a;
    a.layer_id = ls.layer_id;
    a.m = ls.spectrum.size();
    a.d = ls.d;
    a.s = significant_dimensions(ls.spectrum, threshold);
    a.curve = ls.spectrum.cumulative;
    a.dead = ls.spectrum.dead;
    a.sufficient = a.d >= kSamplesPerFeature * a.m;
    return a;
}

template <typename Captures>
LayerAnalysis analyze_layer(const Captures& captures, double threshold = kDefaultThreshold) {
    check_threshold(threshold);
    return summarize(layer_spectrum(captures), threshold);
}

/// Spectra for every layer, keyed and ordered by layer id. Errors are
/// re-thrown with the layer named.
template <typename Captures>
std::vector<LayerSpectrum> network_spectra(const std::map<std::uint32_t, Captures>& captures) {
    if (captures.empty()) throw ArgumentError("analyze_network: no layers to analyze");
    std::vector<LayerSpectrum> out;
    for (const auto& [layer, caps] : captures) {
        try {
            out.push_back(layer_spectrum(caps));
        } catch (const Error& e) {
            const std::string what = "layer " + std::to_string(layer) + ": " + e.what();
            switch (e.kind()) {
                case ErrorKind::usage: throw ArgumentError(what);
                case ErrorKind::numerical: throw NumericalError(what);
                default: throw DataError(what);
            }
        }
        if (out.back().layer_id != layer)
            throw ConsistencyError("captures filed under layer " + std::to_string(layer) + " carry layer id " +
                                   std::to_string(out.back().layer_id));
    }
    return out;
}

template <typename Captures>
NetworkAnalysis analyze_network(const std::map<std::uint32_t, Captures>& captures,
                                double threshold = kDefaultThreshold) {
    check_threshold(threshold);
    NetworkAnalysis na;
    na.threshold = threshold;
    for (const auto& ls : network_spectra(captures)) na.layers.push_back(summarize(ls, threshold));
    return na;
}

// ---------------------------------------------------------------------------
// Planning

enum class DepthRule { strict, tolerant };

inline std::string to_string(DepthRule r) { return r == DepthRule::strict ? "strict" : "tolerant"; }

inline DepthRule parse_depth_rule(const std::string& s) {
    if (s == "strict") return DepthRule::strict;
    if (s == "tolerant") return DepthRule::tolerant;
    throw ArgumentError("unknown depth rule '" + s + "' (expected strict or tolerant)");
}

namespace detail {

inline void check_alignment(const std::vector<std::size_t>& s, const ArchConfig& original) {
    if (s.empty()) throw ArgumentError("planning needs at least one significant-dimension value");
    if (s.size() != original.conv_count())
        throw DimensionError("got " + std::to_string(s.size()) + " significant-dimension values for " +
                             std::to_string(original.conv_count()) + " conv layers");
    if (s.front() == 0) throw DataError("dead network: first layer has zero significant dimensions");
}

// Rebuilds the token list keeping the flagged convs (widths from s) up to
// conv index `stop`. Pools between kept convs survive; a dropped conv in
// front of a pool therefore moves that pool before the next kept conv. When
// the scan stopped early one trailing pool is kept if the original had any
// after the last kept conv.
inline ArchConfig rebuild(const std::vector<std::size_t>& s, const ArchConfig& original,
                          const std::vector<bool>& keep, std::size_t stop) {
    ArchConfig out = original;
    out.tokens.clear();
    std::size_t conv = 0, pending = 0;
    bool pool_after_last_kept = false;
    for (const auto& t : original.tokens) {
        if (is_conv(t)) {
            if (conv < stop && keep[conv]) {
                for (; pending > 0; --pending) out.tokens.emplace_back(MaxPool{});
                out.tokens.emplace_back(Conv{s[conv]});
                pool_after_last_kept = false;
            }
            ++conv;
        } else {
            if (conv <= stop) ++pending;
            pool_after_last_kept = true;
        }
    }
    const bool truncated = stop < s.size();
    if (truncated) {
        if (pool_after_last_kept || pending > 0) out.tokens.emplace_back(MaxPool{});
    } else {
        for (; pending > 0; --pending) out.tokens.emplace_back(MaxPool{});
    }
    validate(out);
    return out;
}

}  // namespace detail

/// Width-only plan: every conv keeps its place, width = S_L.
inline ArchConfig plan_width(const std::vector<std::size_t>& s, const ArchConfig& original) {
    detail::check_alignment(s, original);
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] == 0) throw DataError("layer " + std::to_string(i) + " has zero significant dimensions");
    ArchConfig out = original;
    std::size_t conv = 0;
    for (auto& t : out.tokens)
        if (auto* c = std::get_if<Conv>(&t)) c->width = s[conv++];
    return out;
}

/// Literal single-pass rule: keep the longest prefix with strictly increasing S.
inline ArchConfig plan_depth_strict(const std::vector<std::size_t>& s, const ArchConfig& original) {
    detail::check_alignment(s, original);
    std::vector<bool> keep(s.size(), false);
    keep[0] = true;
    std::size_t stop = s.size();
    for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i] > s[i - 1]) {
            keep[i] = true;
        } else {
            stop = i;
            break;
        }
    }
    return detail::rebuild(s, original, keep, stop);
}

/// Running-max rule: a layer equal to the running max is dropped and the scan
/// goes on; the first layer below the running max ends the network.
inline ArchConfig plan_depth_tolerant(const std::vector<std::size_t>& s, const ArchConfig& original) {
    detail::check_alignment(s, original);
    std::vector<bool> keep(s.size(), false);
    keep[0] = true;
    std::size_t running = s[0], stop = s.size();
    for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i] > running) {
            keep[i] = true;
            running = s[i];
        } else if (s[i] < running) {
            stop = i;
            break;
        }
    }
    return detail::rebuild(s, original, keep, stop);
}

inline ArchConfig plan_depth(const std::vector<std::size_t>& s, const ArchConfig& original, DepthRule rule) {
    return rule == DepthRule::strict ? plan_depth_strict(s, original) : plan_depth_tolerant(s, original);
}

/// Planned configs (width-only, strict, tolerant) with cost reports and
/// ratios against the original.
inline nlohmann::json plan_json(const std::vector<std::size_t>& s, const ArchConfig& original) {
    const CostReport base = count(original);
    nlohmann::json j;
    j["significant_dimensions"] = s;
    j["original"] = {{"config", to_json(original)},
                     {"vector", to_vector_notation(original.tokens)},
                     {"cost", to_json(base)}};
    auto entry = [&](const ArchConfig& cfg) {
        const CostReport c = count(cfg);
        return nlohmann::json{{"config", to_json(cfg)},
                              {"vector", to_vector_notation(cfg.tokens)},
                              {"cost", to_json(c)},
                              {"ratio", to_json(ratio(c, base))}};
    };
    j["significant"] = entry(plan_width(s, original));
    j["strict"] = entry(plan_depth_strict(s, original));
    j["tolerant"] = entry(plan_depth_tolerant(s, original));
    return j;
}

inline nlohmann::json to_json(const LayerAnalysis& a) {
    return {{"layer", a.layer_id}, {"m", a.m},       {"d", a.d},
            {"s", a.s},             {"dead", a.dead}, {"sufficient", a.sufficient},
            {"curve", a.curve}};
}

/// The per-run report: analysis plus, when the original config is known,
/// the planned configs and their cost ratios.
inline nlohmann::json make_report(const NetworkAnalysis& na, const std::optional<ArchConfig>& original) {
    nlohmann::json j;
    j["threshold"] = na.threshold;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : na.layers) j["layers"].push_back(to_json(l));
    j["significant_dimensions"] = na.significant_dimensions();
    if (original) {
        j["config"] = to_json(*original);
        const auto s = na.significant_dimensions();
        if (std::find(s.begin(), s.end(), std::size_t{0}) == s.end()) j["plans"] = plan_json(s, *original);
        else j["plans"] = nullptr;
    }
    return j;
}

/// Reads the S vector from a report: "significant_dimensions", or "s", or
/// the per-layer "layers[].s" entries.
inline std::vector<std::size_t> significant_dimensions_from_report(const nlohmann::json& report) {
    for (const char* key : {"significant_dimensions", "s"})
        if (report.contains(key)) return report.at(key).get<std::vector<std::size_t>>();
    if (report.contains("layers")) {
        std::vector<std::size_t> s;
        for (const auto& l : report.at("layers")) s.push_back(l.at("s").get<std::size_t>());
        return s;
    }
    throw ArgumentError("report has no significant-dimension values");
}

// ---------------------------------------------------------------------------
// Threshold sweeps

struct SweepRow {
    double threshold = 0.0;
    std::uint32_t layer = 0;
    std::size_t m = 0;
    std::size_t s = 0;
    bool zero = false;  // some layer has S_L = 0 at this threshold
    std::optional<CostReport> width_plan;
    std::optional<CostReport> depth_plan;
};

struct SweepResult {
    std::vector<double> thresholds;
    std::vector<NetworkAnalysis> analyses;
    std::vector<std::optional<ArchConfig>> width_configs;
    std::vector<std::optional<ArchConfig>> depth_configs;
    std::vector<SweepRow> rows;
};

inline void check_sweep_thresholds(const std::vector<double>& thresholds) {
    if (thresholds.empty()) throw ArgumentError("sweep needs at least one threshold");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        check_threshold(thresholds[i]);
        if (i > 0 && !(thresholds[i] < thresholds[i - 1]))
            throw ArgumentError("sweep thresholds must be strictly descending");
    }
}

/// Applies every threshold to precomputed spectra. Planned costs need the
/// original config and are left empty when a layer hits S_L = 0.
inline SweepResult sweep(const std::vector<LayerSpectrum>& spectra, const std::vector<double>& thresholds,
                         const std::optional<ArchConfig>& original = std::nullopt,
                         DepthRule rule = DepthRule::tolerant) {
    check_sweep_thresholds(thresholds);
    SweepResult r;
    r.thresholds = thresholds;
    for (double t : thresholds) {
        NetworkAnalysis na;
        na.threshold = t;
        for (const auto& ls : spectra) na.layers.push_back(summarize(ls, t));
        const auto s = na.significant_dimensions();
        const bool zero = std::find(s.begin(), s.end(), std::size_t{0}) != s.end();
        std::optional<ArchConfig> width, depth;
        std::optional<CostReport> width_cost, depth_cost;
        if (original && !zero) {
            width = plan_width(s, *original);
            depth = plan_depth(s, *original, rule);
            width_cost = count(*width);
            depth_cost = count(*depth);
        }
        for (const auto& l : na.layers)
            r.rows.push_back({t, l.layer_id, l.m, l.s, zero, width_cost, depth_cost});
        r.analyses.push_back(std::move(na));
        r.width_configs.push_back(std::move(width));
        r.depth_configs.push_back(std::move(depth));
    }
    return r;
}

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline void write_sweep_csv(const SweepResult& r, std::ostream& out) {
    out << "threshold,layer,m,s_l,zero_flag,planned_macs,planned_params,depth_planned_macs,depth_planned_params\n";
    for (const auto& row : r.rows) {
        out << format_double(row.threshold) << ',' << row.layer << ',' << row.m << ',' << row.s << ','
            << (row.zero ? 1 : 0) << ',';
        if (row.width_plan) out << row.width_plan->macs << ',' << row.width_plan->params << ',';
        else out << ",,";
        if (row.depth_plan) out << row.depth_plan->macs << ',' << row.depth_plan->params;
        else out << ',';
        out << '\n';
    }
}

}  // namespace pcarch
