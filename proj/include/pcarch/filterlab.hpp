#pragma once

// Exhaustive least-significant-filter search and the "which filter absorbs
// the pruned one" measurements: Pearson similarity before retraining versus
// L2 change caused by retraining.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcarch/dataset.hpp"
#include "pcarch/errors.hpp"
#include "pcarch/filters.hpp"
#include "pcarch/net.hpp"

namespace pcarch {

/// Sample Pearson correlation of two flattened filters.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty())
        throw DimensionError("pearson: filters differ in size (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) throw DegenerateInputError("pearson: a filter has zero variance");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Euclidean distance between corresponding filters.
inline std::vector<double> l2_change(const FilterBank& before, const FilterBank& after) {
    if (!before.same_shape(after))
        throw DimensionError("l2_change: banks differ in shape (" + std::to_string(before.count) + " vs " +
                             std::to_string(after.count) + " filters)");
    std::vector<double> out(before.count);
    for (std::size_t f = 0; f < before.count; ++f) {
        auto a = before.filter(f);
        auto b = after.filter(f);
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        out[f] = std::sqrt(s);
    }
    return out;
}

struct PruneCandidate {
    std::size_t filter = 0;  // position in the layer before removal
    double accuracy = 0.0;
    bool diverged = false;
};

template <typename Real>
struct PruneStep {
    std::size_t least_significant = 0;
    NetParams<Real> retrained;  // net with that filter removed, retrained
    std::vector<PruneCandidate> table;
};

/// Removes each filter of `layer` in turn, retrains the reduced net with
/// `retrain`, and keeps the removal with the best accuracy on `eval` (lowest
/// index on ties). A diverging candidate scores 0.
template <typename Real>
PruneStep<Real> exhaustive_prune_step(const NetParams<Real>& p, std::size_t layer, const Dataset& train_set,
                                      const Dataset& eval_set, const Hyper& retrain, std::uint64_t seed) {
    if (layer >= p.convs.size()) throw ArgumentError("no conv layer " + std::to_string(layer));
    const std::size_t width = p.convs[layer].out_channels;
    if (width < 2) throw ArgumentError("exhaustive pruning needs a layer with at least 2 filters");

    PruneStep<Real> step;
    std::optional<NetParams<Real>> best;
    double best_accuracy = -1.0;
    for (std::size_t f = 0; f < width; ++f) {
        PruneCandidate c{f, 0.0, false};
        try {
            auto result = train(remove_filter(p, layer, f), train_set, retrain, seed);
            c.accuracy = evaluate(result.params, eval_set);
            if (c.accuracy > best_accuracy) {
                best_accuracy = c.accuracy;
                step.least_significant = f;
                best = std::move(result.params);
            }
        } catch (const TrainingError&) {
            c.diverged = true;
        }
        step.table.push_back(c);
    }
    if (!best) throw NumericalError("every pruning candidate of layer " + std::to_string(layer) + " diverged");
    step.retrained = std::move(*best);
    return step;
}

struct PruneTrace {
    std::size_t iteration = 0;
    std::size_t layer = 0;
    std::size_t pruned = 0;                          // original filter id
    std::vector<std::size_t> remaining;              // original ids, in bank order after removal
    std::vector<std::optional<double>> pearson;      // vs pruned filter, before retraining
    std::vector<double> l2_change;                   // before -> after retraining
    std::optional<std::size_t> predicted;            // argmax Pearson (original id)
    std::size_t actual = 0;                          // argmax L2 change (original id)
    bool match = false;
    double accuracy = 0.0;
    std::vector<PruneCandidate> candidates;

    friend bool operator==(const PruneTrace& a, const PruneTrace& b) {
        auto same_candidates = [&] {
            if (a.candidates.size() != b.candidates.size()) return false;
            for (std::size_t i = 0; i < a.candidates.size(); ++i)
                if (a.candidates[i].filter != b.candidates[i].filter ||
                    a.candidates[i].accuracy != b.candidates[i].accuracy ||
                    a.candidates[i].diverged != b.candidates[i].diverged)
                    return false;
            return true;
        };
        return a.iteration == b.iteration && a.layer == b.layer && a.pruned == b.pruned &&
               a.remaining == b.remaining && a.pearson == b.pearson && a.l2_change == b.l2_change &&
               a.predicted == b.predicted && a.actual == b.actual && a.match == b.match &&
               a.accuracy == b.accuracy && same_candidates();
    }
};

/// Compares the filter most similar to the pruned one (before retraining)
/// with the filter that moved most during retraining. `ids` maps bank
/// positions of `before` to original filter ids.
template <typename Real>
PruneTrace predict_and_verify(const NetParams<Real>& before, std::size_t layer, const PruneStep<Real>& step,
                              const std::vector<std::size_t>& ids, std::size_t iteration = 0) {
    const FilterBank pre = filter_bank(before, layer);
    const FilterBank post = filter_bank(step.retrained, layer);
    if (ids.size() != pre.count) throw DimensionError("predict_and_verify: id map does not match the bank");
    if (post.count + 1 != pre.count)
        throw DimensionError("predict_and_verify: retrained bank should have exactly one filter fewer");
    const std::size_t removed = step.least_significant;

    PruneTrace t;
    t.iteration = iteration;
    t.layer = layer;
    t.pruned = ids[removed];
    t.candidates = step.table;
    t.accuracy = step.table[removed].accuracy;

    FilterBank kept(post.count, pre.in_channels, pre.kernel);
    for (std::size_t f = 0, j = 0; f < pre.count; ++f) {
        if (f == removed) continue;
        std::copy(pre.filter(f).begin(), pre.filter(f).end(), kept.filter(j).begin());
        t.remaining.push_back(ids[f]);
        try {
            t.pearson.emplace_back(pearson(pre.filter(removed), pre.filter(f)));
        } catch (const DegenerateInputError&) {
            t.pearson.emplace_back(std::nullopt);
        }
        ++j;
    }
    t.l2_change = l2_change(kept, post);

    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < t.pearson.size(); ++j)
        if (t.pearson[j] && (!best || *t.pearson[j] > *t.pearson[*best])) best = j;
    if (best) t.predicted = t.remaining[*best];
    const auto moved = std::max_element(t.l2_change.begin(), t.l2_change.end()) - t.l2_change.begin();
    t.actual = t.remaining[static_cast<std::size_t>(moved)];
    t.match = t.predicted && *t.predicted == t.actual;
    return t;
}

inline nlohmann::json to_json(const PruneTrace& t) {
    nlohmann::json j;
    j["iteration"] = t.iteration;
    j["layer"] = t.layer;
    j["pruned"] = t.pruned;
    j["remaining"] = t.remaining;
    auto pr = nlohmann::json::array();
    for (const auto& v : t.pearson) pr.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    j["pearson"] = pr;
    j["l2_change"] = t.l2_change;
    j["predicted"] = t.predicted ? nlohmann::json(*t.predicted) : nlohmann::json(nullptr);
    j["actual"] = t.actual;
    j["match"] = t.match;
    j["accuracy"] = t.accuracy;
    auto cands = nlohmann::json::array();
    for (const auto& c : t.candidates)
        cands.push_back({{"filter", c.filter}, {"accuracy", c.accuracy}, {"diverged", c.diverged}});
    j["candidates"] = cands;
    return j;
}

inline PruneTrace prune_trace_from_json(const nlohmann::json& j) {
    PruneTrace t;
    t.iteration = j.at("iteration").get<std::size_t>();
    t.layer = j.at("layer").get<std::size_t>();
    t.pruned = j.at("pruned").get<std::size_t>();
    t.remaining = j.at("remaining").get<std::vector<std::size_t>>();
    for (const auto& v : j.at("pearson"))
        t.pearson.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    t.l2_change = j.at("l2_change").get<std::vector<double>>();
    if (!j.at("predicted").is_null()) t.predicted = j.at("predicted").get<std::size_t>();
    t.actual = j.at("actual").get<std::size_t>();
    t.match = j.at("match").get<bool>();
    t.accuracy = j.at("accuracy").get<double>();
    for (const auto& c : j.at("candidates"))
        t.candidates.push_back(
            {c.at("filter").get<std::size_t>(), c.at("accuracy").get<double>(), c.at("diverged").get<bool>()});
    return t;
}

/// Tiles a filter bank into an image, one tile per filter, each tile scaled
/// to its own min/max. Three-channel banks become colour PPM, others are
/// averaged over input channels into PGM.
inline void write_filter_image(const FilterBank& bank, const std::filesystem::path& path, std::size_t zoom = 8) {
    const std::size_t k = bank.kernel, tile = k * zoom + 2;
    const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(bank.count))));
    const std::size_t rows = (bank.count + cols - 1) / std::max<std::size_t>(cols, 1);
    const bool colour = bank.in_channels == 3;
    const std::size_t planes = colour ? 3 : 1;
    const std::size_t width = cols * tile, height = rows * tile;
    std::vector<unsigned char> img(width * height * planes, 0);
    for (std::size_t f = 0; f < bank.count; ++f) {
        auto w = bank.filter(f);
        const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
        const double range = *hi - *lo > 0.0 ? *hi - *lo : 1.0;
        const std::size_t ox = (f % cols) * tile + 1, oy = (f / cols) * tile + 1;
        for (std::size_t y = 0; y < k * zoom; ++y)
            for (std::size_t x = 0; x < k * zoom; ++x)
                for (std::size_t p = 0; p < planes; ++p) {
                    const std::size_t ky = y / zoom, kx = x / zoom;
                    double v = 0.0;
                    if (colour) {
                        v = w[(p * k + ky) * k + kx];
                    } else {
                        for (std::size_t c = 0; c < bank.in_channels; ++c) v += w[(c * k + ky) * k + kx];
                        v /= static_cast<double>(bank.in_channels);
                    }
                    const double g = std::clamp((v - *lo) / range, 0.0, 1.0);
                    img[((oy + y) * width + ox + x) * planes + p] = static_cast<unsigned char>(std::lround(255.0 * g));
                }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << (colour ? "P6" : "P5") << '\n' << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

}  // namespace pcarch
