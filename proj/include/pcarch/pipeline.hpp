#pragma once

// train -> capture -> analyze -> plan -> retrain, as one reproducible run.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcarch/analyzer.hpp"
#include "pcarch/arch.hpp"
#include "pcarch/checkpoint.hpp"
#include "pcarch/filterlab.hpp"
#include "pcarch/ingest.hpp"
#include "pcarch/net.hpp"
#include "pcarch/profiler.hpp"
#include "pcarch/run_config.hpp"

namespace pcarch {

using Logger = std::function<void(const std::string&)>;

/// Per-layer batch counts so each layer sees at least 100 samples per filter.
inline std::vector<std::size_t> capture_plan(const ArchConfig& cfg, std::size_t batch_size) {
    std::vector<std::size_t> out;
    for (const auto& c : geometry(cfg).convs) out.push_back(required_batches(c.out_channels, c.h, c.w, batch_size));
    return out;
}

/// Eval-mode forward passes over consecutive training batches (wrapping
/// around a short dataset); layer l keeps its first capture_plan()[l] taps.
template <typename Real, typename Sink>
void capture_each(const NetParams<Real>& p, const Dataset& data, std::size_t batch_size, TapPoint tap, Sink&& sink) {
    if (data.size() == 0) throw ArgumentError("capture: empty dataset");
    const auto plan = capture_plan(p.config, batch_size);
    const std::size_t passes = *std::max_element(plan.begin(), plan.end());
    std::vector<std::size_t> idx(batch_size);
    for (std::size_t k = 0; k < passes; ++k) {
        for (std::size_t i = 0; i < batch_size; ++i) idx[i] = (k * batch_size + i) % data.size();
        const auto batch = make_batch<Real>(data, idx);
        auto res = forward_with_taps(p, batch, tap);
        for (std::size_t l = 0; l < res.taps.size(); ++l)
            if (k < plan[l]) sink(std::move(res.taps[l]), k);
    }
}

template <typename Real>
std::map<std::uint32_t, std::vector<ActivationTensor>> capture_in_memory(const NetParams<Real>& p, const Dataset& data,
                                                                         std::size_t batch_size,
                                                                         TapPoint tap = TapPoint::post_bn) {
    std::map<std::uint32_t, std::vector<ActivationTensor>> out;
    capture_each(p, data, batch_size, tap, [&](ActivationTensor&& t, std::size_t) {
        const auto id = t.layer_id;
        out[id].push_back(std::move(t));
    });
    return out;
}

/// Writes layer<id>_batch<k>.act files into `dir`.
template <typename Real>
std::map<std::uint32_t, std::vector<std::filesystem::path>> capture_to_directory(
    const NetParams<Real>& p, const Dataset& data, std::size_t batch_size, TapPoint tap,
    const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::map<std::uint32_t, std::vector<std::filesystem::path>> out;
    capture_each(p, data, batch_size, tap, [&](ActivationTensor&& t, std::size_t k) {
        const auto path = dir / capture_file_name(t.layer_id, k);
        write_activations_file(t, path);
        out[t.layer_id].push_back(path);
    });
    return out;
}

inline nlohmann::json to_json(const std::vector<EpochRecord>& history) {
    auto arr = nlohmann::json::array();
    for (const auto& e : history) {
        nlohmann::json j{{"epoch", e.epoch}, {"loss", e.loss}, {"train_accuracy", e.train_accuracy}};
        j["test_accuracy"] = e.test_accuracy ? nlohmann::json(*e.test_accuracy) : nlohmann::json(nullptr);
        arr.push_back(j);
    }
    return arr;
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArgumentError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

struct PipelineResult {
    ArchConfig parent_config;
    ArchConfig planned_config;
    double parent_accuracy = 0.0;
    double planned_accuracy = 0.0;
    CostReport parent_cost;
    CostReport planned_cost;
    NetworkAnalysis analysis;
    std::vector<LayerSpectrum> spectra;
    std::filesystem::path capture_dir;
    nlohmann::json summary;
};

/// The single-retrain workflow. Every artefact lands in `out`; identical
/// inputs and seed give byte-identical files.
inline PipelineResult run_pipeline(const RunConfig& run, const ArchConfig& parent_cfg, const DataSplit& data,
                                   const std::filesystem::path& out, const Logger& log = {}) {
    auto note = [&](const std::string& s) {
        if (log) log(s);
    };
    const std::uint64_t seed = run.require_seed("pipeline");
    const double threshold = run.thresholds.front();
    std::filesystem::create_directories(out);
    const Dataset* test = data.test.size() ? &data.test : &data.train;

    PipelineResult r;
    r.parent_config = parent_cfg;
    note("training parent " + to_vector_notation(parent_cfg.tokens));
    auto epoch_log = [&](const EpochRecord& e) {
        note("  epoch " + std::to_string(e.epoch) + " loss " + format_double(e.loss) + " test " +
             (e.test_accuracy ? format_double(*e.test_accuracy) : std::string("-")));
    };
    auto parent = train(build<float>(parent_cfg, seed), data.train, run.hyper, seed, test, epoch_log);
    r.parent_accuracy = evaluate(parent.params, *test);
    save_checkpoint(parent.params, out / "parent.ckpt");
    write_json(to_json(parent.history), out / "parent_history.json");

    r.capture_dir = out / "captures";
    std::filesystem::remove_all(r.capture_dir);
    note("capturing activations (" + to_string(run.tap) + ")");
    const auto files = capture_to_directory(parent.params, data.train, run.capture_batch(), run.tap, r.capture_dir);

    note("analyzing " + std::to_string(files.size()) + " layers at threshold " + format_double(threshold));
    r.spectra = network_spectra(files);
    r.analysis.threshold = threshold;
    for (const auto& ls : r.spectra) r.analysis.layers.push_back(summarize(ls, threshold));
    write_json(make_report(r.analysis, parent_cfg), out / "report.json");

    const auto s = r.analysis.significant_dimensions();
    const auto plans = plan_json(s, parent_cfg);
    write_json(plans, out / "plan.json");
    save_arch(plan_depth_strict(s, parent_cfg), out / "plan_strict.json");
    save_arch(plan_depth_tolerant(s, parent_cfg), out / "plan_tolerant.json");
    r.planned_config = plan_depth(s, parent_cfg, run.rule);

    if (run.thresholds.size() > 1) {
        std::ofstream csv(out / "sweep.csv", std::ios::trunc);
        write_sweep_csv(sweep(r.spectra, run.thresholds, parent_cfg, run.rule), csv);
    }

    note("retraining planned " + to_vector_notation(r.planned_config.tokens) + " (" + to_string(run.rule) + ")");
    auto planned = train(build<float>(r.planned_config, seed), data.train, run.hyper, seed, test, epoch_log);
    r.planned_accuracy = evaluate(planned.params, *test);
    save_checkpoint(planned.params, out / "planned.ckpt");
    write_json(to_json(planned.history), out / "planned_history.json");

    r.parent_cost = count(parent_cfg);
    r.planned_cost = count(r.planned_config);
    nlohmann::json j;
    j["seed"] = seed;
    j["threshold"] = threshold;
    j["rule"] = to_string(run.rule);
    j["tap"] = to_string(run.tap);
    j["significant_dimensions"] = s;
    j["parent"] = {{"config", to_json(parent_cfg)},
                   {"vector", to_vector_notation(parent_cfg.tokens)},
                   {"accuracy", r.parent_accuracy},
                   {"cost", to_json(r.parent_cost)}};
    j["planned"] = {{"config", to_json(r.planned_config)},
                    {"vector", to_vector_notation(r.planned_config.tokens)},
                    {"accuracy", r.planned_accuracy},
                    {"cost", to_json(r.planned_cost)}};
    j["ratio"] = to_json(ratio(r.planned_cost, r.parent_cost));
    j["accuracy_drop"] = r.parent_accuracy - r.planned_accuracy;
    write_json(j, out / "pipeline.json");
    r.summary = std::move(j);
    return r;
}

struct PruneLabResult {
    std::vector<PruneTrace> traces;
    NetParams<float> final_params;
};

/// Repeated exhaustive pruning of one layer. Filter ids in the traces refer
/// to the layer as it was before the first iteration.
inline PruneLabResult run_prunelab(const NetParams<float>& parent, std::size_t layer, std::size_t iterations,
                                   const DataSplit& data, const Hyper& retrain, std::uint64_t seed,
                                   const Logger& log = {}) {
    if (layer >= parent.convs.size())
        throw ArgumentError("prunelab: no conv layer " + std::to_string(layer) + " (net has " +
                            std::to_string(parent.convs.size()) + ")");
    const Dataset& eval_set = data.test.size() ? data.test : data.train;
    PruneLabResult r{{}, parent};
    std::vector<std::size_t> ids(parent.convs[layer].out_channels);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    for (std::size_t it = 0; it < iterations; ++it) {
        auto step = exhaustive_prune_step(r.final_params, layer, data.train, eval_set, retrain, seed + it);
        auto trace = predict_and_verify(r.final_params, layer, step, ids, it);
        if (log)
            log("iteration " + std::to_string(it) + ": pruned filter " + std::to_string(trace.pruned) +
                ", accuracy " + format_double(trace.accuracy) + ", match " + (trace.match ? "yes" : "no"));
        ids = trace.remaining;
        r.traces.push_back(std::move(trace));
        r.final_params = std::move(step.retrained);
    }
    return r;
}

}  // namespace pcarch
