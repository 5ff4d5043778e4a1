#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcarch/analyzer.hpp"
#include "pcarch/dataset.hpp"
#include "pcarch/errors.hpp"
#include "pcarch/net.hpp"

namespace pcarch {

struct SyntheticData {
    std::size_t train = 4000;
    std::size_t test = 1000;
    std::uint64_t seed = 20190601;
    SyntheticSpec spec;
};

/// Everything a command needs besides its own file arguments. Loaded from a
/// JSON run file; command-line flags override individual fields.
struct RunConfig {
    std::string data = "synthetic";  // "synthetic" or a CIFAR-10 binary file
    std::string test_data;           // optional CIFAR-10 binary test file
    std::size_t subset = 0;          // first K training records, 0 = all
    double holdout = 0.2;            // test fraction when no test file is given
    SyntheticData synthetic;
    Normalization normalization;
    std::string config;  // ArchConfig JSON path
    Hyper hyper;
    Hyper retrain{2, 0.02, 0.9, 5e-4, 64, 0.1, false};  // per-candidate budget in the filter lab
    std::optional<std::uint64_t> seed;
    std::vector<double> thresholds{kDefaultThreshold};
    std::string out = "out";
    DepthRule rule = DepthRule::tolerant;
    TapPoint tap = TapPoint::post_bn;
    std::size_t capture_batch_size = 0;  // 0 = hyper.batch_size
    std::size_t prune_layer = 0;
    std::size_t prune_iterations = 1;

    std::uint64_t require_seed(const std::string& command) const {
        if (!seed) throw ArgumentError(command + " needs --seed (or \"seed\" in the run file)");
        return *seed;
    }
    std::size_t capture_batch() const { return capture_batch_size ? capture_batch_size : hyper.batch_size; }

    void validate() const {
        for (double t : thresholds) check_threshold(t);
        if (holdout < 0.0 || holdout >= 1.0) throw ArgumentError("holdout must lie in [0, 1)");
        if (hyper.batch_size == 0) throw ArgumentError("batch size must be >= 1");
    }
};

inline nlohmann::json to_json(const Hyper& h) {
    return {{"epochs", h.epochs},           {"learning_rate", h.learning_rate}, {"momentum", h.momentum},
            {"weight_decay", h.weight_decay}, {"batch_size", h.batch_size},   {"bn_momentum", h.bn_momentum},
            {"cosine_schedule", h.cosine_schedule}};
}

inline Hyper hyper_from_json(const nlohmann::json& j, Hyper h = {}) {
    if (j.contains("epochs")) h.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("learning_rate")) h.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("momentum")) h.momentum = j.at("momentum").get<double>();
    if (j.contains("weight_decay")) h.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("batch_size")) h.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("bn_momentum")) h.bn_momentum = j.at("bn_momentum").get<double>();
    if (j.contains("cosine_schedule")) h.cosine_schedule = j.at("cosine_schedule").get<bool>();
    return h;
}

inline std::string to_string(TapPoint t) { return t == TapPoint::post_bn ? "post-bn" : "pre-bn"; }

inline TapPoint parse_tap(const std::string& s) {
    if (s == "post-bn") return TapPoint::post_bn;
    if (s == "pre-bn") return TapPoint::pre_bn;
    throw ArgumentError("unknown tap point '" + s + "' (expected pre-bn or post-bn)");
}

inline nlohmann::json to_json(const RunConfig& r) {
    nlohmann::json j;
    j["data"] = r.data;
    j["test_data"] = r.test_data;
    j["subset"] = r.subset;
    j["holdout"] = r.holdout;
    j["synthetic"] = {{"train", r.synthetic.train},
                      {"test", r.synthetic.test},
                      {"seed", r.synthetic.seed},
                      {"size", r.synthetic.spec.size},
                      {"classes", r.synthetic.spec.classes},
                      {"noise", r.synthetic.spec.noise}};
    j["normalization"] = {{"mean", r.normalization.mean}, {"std", r.normalization.stddev}};
    j["config"] = r.config;
    j["hyper"] = to_json(r.hyper);
    j["retrain"] = to_json(r.retrain);
    j["seed"] = r.seed ? nlohmann::json(*r.seed) : nlohmann::json(nullptr);
    j["thresholds"] = r.thresholds;
    j["out"] = r.out;
    j["rule"] = to_string(r.rule);
    j["tap"] = to_string(r.tap);
    j["capture_batch_size"] = r.capture_batch_size;
    j["prune_layer"] = r.prune_layer;
    j["prune_iterations"] = r.prune_iterations;
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig r;
    try {
        if (j.contains("data")) r.data = j.at("data").get<std::string>();
        if (j.contains("test_data")) r.test_data = j.at("test_data").get<std::string>();
        if (j.contains("subset")) r.subset = j.at("subset").get<std::size_t>();
        if (j.contains("holdout")) r.holdout = j.at("holdout").get<double>();
        if (j.contains("synthetic")) {
            const auto& s = j.at("synthetic");
            if (s.contains("train")) r.synthetic.train = s.at("train").get<std::size_t>();
            if (s.contains("test")) r.synthetic.test = s.at("test").get<std::size_t>();
            if (s.contains("seed")) r.synthetic.seed = s.at("seed").get<std::uint64_t>();
            if (s.contains("size")) r.synthetic.spec.size = s.at("size").get<std::size_t>();
            if (s.contains("classes")) r.synthetic.spec.classes = s.at("classes").get<std::size_t>();
            if (s.contains("noise")) r.synthetic.spec.noise = s.at("noise").get<float>();
        }
        if (j.contains("normalization")) {
            const auto& n = j.at("normalization");
            if (n.contains("mean")) r.normalization.mean = n.at("mean").get<std::array<float, 3>>();
            if (n.contains("std")) r.normalization.stddev = n.at("std").get<std::array<float, 3>>();
        }
        if (j.contains("config")) r.config = j.at("config").get<std::string>();
        if (j.contains("hyper")) r.hyper = hyper_from_json(j.at("hyper"));
        if (j.contains("retrain")) r.retrain = hyper_from_json(j.at("retrain"), r.retrain);
        if (j.contains("seed") && !j.at("seed").is_null()) r.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("thresholds")) r.thresholds = j.at("thresholds").get<std::vector<double>>();
        if (j.contains("out")) r.out = j.at("out").get<std::string>();
        if (j.contains("rule")) r.rule = parse_depth_rule(j.at("rule").get<std::string>());
        if (j.contains("tap")) r.tap = parse_tap(j.at("tap").get<std::string>());
        if (j.contains("capture_batch_size")) r.capture_batch_size = j.at("capture_batch_size").get<std::size_t>();
        if (j.contains("prune_layer")) r.prune_layer = j.at("prune_layer").get<std::size_t>();
        if (j.contains("prune_iterations")) r.prune_iterations = j.at("prune_iterations").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("run config: ") + e.what());
    }
    r.validate();
    return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open run config " + path.string());
    try {
        return run_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ArgumentError(path.string() + ": " + e.what());
    }
}

struct DataSplit {
    Dataset train;
    Dataset test;
};

/// Training and evaluation sets as the run file describes them.
inline DataSplit load_data(const RunConfig& r) {
    if (r.data == "synthetic") {
        const std::size_t n = r.subset ? std::min(r.subset, r.synthetic.train) : r.synthetic.train;
        return {make_synthetic(n, r.synthetic.seed, r.synthetic.spec),
                make_synthetic(r.synthetic.test, r.synthetic.seed + 1, r.synthetic.spec)};
    }
    Dataset all = load_cifar_binary(r.data, r.subset, r.normalization);
    if (!r.test_data.empty()) return {std::move(all), load_cifar_binary(r.test_data, 0, r.normalization)};
    const auto test_n = static_cast<std::size_t>(static_cast<double>(all.size()) * r.holdout);
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < all.size(); ++i) (i < all.size() - test_n ? tr : te).push_back(i);
    return {select(all, tr), select(all, te)};
}

}  // namespace pcarch
