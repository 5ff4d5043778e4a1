// pcarch: command-line front end for the analysis/planning pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pcarch/analyzer.hpp"
#include "pcarch/arch.hpp"
#include "pcarch/checkpoint.hpp"
#include "pcarch/filterlab.hpp"
#include "pcarch/ingest.hpp"
#include "pcarch/pipeline.hpp"
#include "pcarch/profiler.hpp"
#include "pcarch/run_config.hpp"

namespace fs = std::filesystem;
using namespace pcarch;

namespace {

// Flags shared by every subcommand; unset ones fall back to the run file.
struct Common {
    std::string run_file;
    std::string config;
    std::string data;
    std::string test_data;
    std::optional<std::size_t> subset;
    std::optional<std::uint64_t> seed;
    std::vector<double> thresholds;
    std::string rule;
    std::string tap;
    std::string out;
    std::optional<std::size_t> epochs;
    bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--run", c.run_file, "run file (JSON) with defaults for everything below");
    sub->add_option("--config", c.config, "architecture config JSON");
    sub->add_option("--data", c.data, "CIFAR-10 binary file, or 'synthetic'");
    sub->add_option("--test-data", c.test_data, "CIFAR-10 binary test file");
    sub->add_option("--subset", c.subset, "use the first N training records");
    sub->add_option("--seed", c.seed, "RNG seed (required for training)");
    sub->add_option("--threshold", c.thresholds, "variance threshold, repeatable for sweep");
    sub->add_option("--rule", c.rule, "depth rule")->check(CLI::IsMember({"strict", "tolerant"}));
    sub->add_option("--tap", c.tap, "capture point")->check(CLI::IsMember({"pre-bn", "post-bn"}));
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--epochs", c.epochs, "override training epochs");
    sub->add_flag("--quiet,-q", c.quiet, "no progress output");
}

RunConfig resolve(const Common& c) {
    RunConfig r;
    if (!c.run_file.empty()) {
        r = load_run_config(c.run_file);
        // paths inside a run file are relative to it
        const fs::path base = fs::path(c.run_file).parent_path();
        auto rebase = [&](std::string& p) {
            if (!p.empty() && p != "synthetic" && fs::path(p).is_relative()) p = (base / p).string();
        };
        rebase(r.config);
        rebase(r.data);
        rebase(r.test_data);
    }
    if (!c.config.empty()) r.config = c.config;
    if (!c.data.empty()) r.data = c.data;
    if (!c.test_data.empty()) r.test_data = c.test_data;
    if (c.subset) r.subset = *c.subset;
    if (c.seed) r.seed = *c.seed;
    if (!c.thresholds.empty()) r.thresholds = c.thresholds;
    if (!c.rule.empty()) r.rule = parse_depth_rule(c.rule);
    if (!c.tap.empty()) r.tap = parse_tap(c.tap);
    if (!c.out.empty()) r.out = c.out;
    if (c.epochs) r.hyper.epochs = *c.epochs;
    r.validate();
    return r;
}

ArchConfig require_arch(const RunConfig& r, const std::string& cmd) {
    if (r.config.empty()) throw ArgumentError(cmd + " needs --config");
    return load_arch(r.config);
}

double single_threshold(const RunConfig& r, const std::string& cmd) {
    if (r.thresholds.size() != 1) throw ArgumentError(cmd + " takes exactly one --threshold");
    return r.thresholds.front();
}

Logger make_logger(const Common& c) {
    if (c.quiet) return {};
    return [](const std::string& s) { std::cerr << s << '\n'; };
}

void print_accuracy(const char* label, double acc) { std::printf("%s %.4f\n", label, acc); }

int cmd_train(const Common& c) {
    const RunConfig r = resolve(c);
    const auto seed = r.require_seed("train");
    const ArchConfig cfg = require_arch(r, "train");
    const auto data = load_data(r);
    const fs::path out = r.out;
    fs::create_directories(out);
    const auto log = make_logger(c);
    auto result = train(build<float>(cfg, seed), data.train, r.hyper, seed, data.test.size() ? &data.test : nullptr,
                        [&](const EpochRecord& e) {
                            if (log)
                                log("epoch " + std::to_string(e.epoch) + " loss " + format_double(e.loss) +
                                    (e.test_accuracy ? " test " + format_double(*e.test_accuracy) : ""));
                        });
    save_checkpoint(result.params, out / "model.ckpt");
    write_json(to_json(result.history), out / "history.json");
    if (data.test.size()) print_accuracy("test_accuracy", evaluate(result.params, data.test));
    return 0;
}

int cmd_capture(const Common& c, const std::string& checkpoint) {
    const RunConfig r = resolve(c);
    const auto params = load_checkpoint<float>(checkpoint);
    const auto data = load_data(r);
    const auto files = capture_to_directory(params, data.train, r.capture_batch(), r.tap, r.out);
    for (const auto& [layer, list] : files) std::printf("layer %u: %zu files\n", layer, list.size());
    return 0;
}

int cmd_analyze(const Common& c, const std::string& acts) {
    const RunConfig r = resolve(c);
    const double t = single_threshold(r, "analyze");
    const auto files = discover_captures(acts);
    if (files.empty()) throw DataError("no layer<id>_batch<k>.act files in " + acts);
    const auto na = analyze_network(files, t);
    std::optional<ArchConfig> original;
    if (!r.config.empty()) original = load_arch(r.config);
    fs::create_directories(r.out);
    write_json(make_report(na, original), fs::path(r.out) / "report.json");
    for (const auto& l : na.layers)
        std::printf("layer %u: m=%zu d=%zu s=%zu%s%s\n", l.layer_id, l.m, l.d, l.s, l.dead ? " dead" : "",
                    l.sufficient ? "" : " (fewer than 100 samples per filter)");
    return 0;
}

int cmd_plan(const Common& c, const std::string& report) {
    const RunConfig r = resolve(c);
    const auto j = read_json(report);
    std::vector<std::size_t> s;
    try {
        s = significant_dimensions_from_report(j);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(report + ": " + e.what());
    }
    ArchConfig original;
    if (!r.config.empty()) original = load_arch(r.config);
    else if (j.contains("config")) original = arch_from_json(j.at("config"));
    else throw ArgumentError("plan needs --config or a report that embeds the original config");

    fs::create_directories(r.out);
    const fs::path out = r.out;
    const auto strict = plan_depth_strict(s, original);
    const auto tolerant = plan_depth_tolerant(s, original);
    save_arch(strict, out / "plan_strict.json");
    save_arch(tolerant, out / "plan_tolerant.json");
    write_json(plan_json(s, original), out / "plan.json");
    const auto base = count(original);
    for (const auto& [name, cfg] : {std::pair{"significant", plan_width(s, original)}, std::pair{"strict", strict},
                                    std::pair{"tolerant", tolerant}}) {
        const auto q = ratio(count(cfg), base);
        std::printf("%-11s %s macs %s params %s\n", name, to_vector_notation(cfg.tokens).c_str(),
                    format_ratio(q.macs).c_str(), format_ratio(q.params).c_str());
    }
    return 0;
}

int cmd_sweep(const Common& c, const std::string& acts) {
    const RunConfig r = resolve(c);
    const auto files = discover_captures(acts);
    if (files.empty()) throw DataError("no layer<id>_batch<k>.act files in " + acts);
    std::optional<ArchConfig> original;
    if (!r.config.empty()) original = load_arch(r.config);
    check_sweep_thresholds(r.thresholds);
    const auto result = sweep(network_spectra(files), r.thresholds, original, r.rule);
    fs::create_directories(r.out);
    const auto path = fs::path(r.out) / "sweep.csv";
    std::ofstream csv(path, std::ios::trunc);
    if (!csv) throw ArgumentError("cannot write " + path.string());
    write_sweep_csv(result, csv);
    std::printf("%s\n", path.string().c_str());
    return 0;
}

int cmd_pipeline(const Common& c) {
    const RunConfig r = resolve(c);
    const auto cfg = require_arch(r, "pipeline");
    const auto data = load_data(r);
    const auto res = run_pipeline(r, cfg, data, r.out, make_logger(c));
    std::printf("parent  %s accuracy %.4f\n", to_vector_notation(res.parent_config.tokens).c_str(),
                res.parent_accuracy);
    std::printf("planned %s accuracy %.4f\n", to_vector_notation(res.planned_config.tokens).c_str(),
                res.planned_accuracy);
    const auto q = ratio(res.planned_cost, res.parent_cost);
    std::printf("macs %s params %s\n", format_ratio(q.macs).c_str(), format_ratio(q.params).c_str());
    return 0;
}

int cmd_prunelab(const Common& c, const std::string& checkpoint, std::optional<std::size_t> layer,
                 std::optional<std::size_t> iterations, bool images) {
    RunConfig r = resolve(c);
    if (layer) r.prune_layer = *layer;
    if (iterations) r.prune_iterations = *iterations;
    const auto seed = r.require_seed("prunelab");
    const auto data = load_data(r);
    const auto log = make_logger(c);
    NetParams<float> parent;
    if (!checkpoint.empty()) {
        parent = load_checkpoint<float>(checkpoint);
    } else {
        const auto cfg = require_arch(r, "prunelab");
        if (log) log("training parent " + to_vector_notation(cfg.tokens));
        parent = train(build<float>(cfg, seed), data.train, r.hyper, seed).params;
    }
    const fs::path out = r.out;
    fs::create_directories(out);
    if (images) write_filter_image(filter_bank(parent, r.prune_layer), out / "filters_before.ppm");
    const auto lab = run_prunelab(parent, r.prune_layer, r.prune_iterations, data, r.retrain, seed, log);
    if (images) write_filter_image(filter_bank(lab.final_params, r.prune_layer), out / "filters_after.ppm");
    auto arr = nlohmann::json::array();
    std::size_t matches = 0;
    for (const auto& t : lab.traces) {
        arr.push_back(to_json(t));
        matches += t.match ? 1 : 0;
    }
    write_json(arr, out / "prune_traces.json");
    std::printf("matches %zu/%zu\n", matches, lab.traces.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PCA-driven CNN architecture planning"};
    app.require_subcommand(1);
    Common common;
    std::string checkpoint, acts, report;
    std::optional<std::size_t> layer, iterations;
    bool images = false;

    auto* train_cmd = app.add_subcommand("train", "train a net from a config");
    add_common(train_cmd, common);

    auto* capture_cmd = app.add_subcommand("capture", "write per-layer activation files from a checkpoint");
    add_common(capture_cmd, common);
    capture_cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();

    auto* analyze_cmd = app.add_subcommand("analyze", "significant dimensions of captured activations");
    add_common(analyze_cmd, common);
    analyze_cmd->add_option("--acts", acts, "directory of .act files")->required();

    auto* plan_cmd = app.add_subcommand("plan", "derive strict and tolerant configs from a report");
    add_common(plan_cmd, common);
    plan_cmd->add_option("--report", report, "report JSON (or a hand-written S vector)")->required();

    auto* sweep_cmd = app.add_subcommand("sweep", "significant dimensions over a list of thresholds");
    add_common(sweep_cmd, common);
    sweep_cmd->add_option("--acts", acts, "directory of .act files")->required();

    auto* pipeline_cmd = app.add_subcommand("pipeline", "train, capture, analyze, plan and retrain");
    add_common(pipeline_cmd, common);

    auto* prune_cmd = app.add_subcommand("prunelab", "exhaustive filter pruning with absorber prediction");
    add_common(prune_cmd, common);
    prune_cmd->add_option("--checkpoint", checkpoint, "parent checkpoint (trained from --config if absent)");
    prune_cmd->add_option("--layer", layer, "conv layer to prune (0-based)");
    prune_cmd->add_option("--iterations", iterations, "number of filters to remove");
    prune_cmd->add_flag("--images", images, "write filter images before and after");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : exit_code(ErrorKind::usage);
    }

    try {
        if (*train_cmd) return cmd_train(common);
        if (*capture_cmd) return cmd_capture(common, checkpoint);
        if (*analyze_cmd) return cmd_analyze(common, acts);
        if (*plan_cmd) return cmd_plan(common, report);
        if (*sweep_cmd) return cmd_sweep(common, acts);
        if (*pipeline_cmd) return cmd_pipeline(common);
        if (*prune_cmd) return cmd_prunelab(common, checkpoint, layer, iterations, images);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed JSON: " << e.what() << '\n';
        return exit_code(ErrorKind::data);
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(ErrorKind::data);
    }
    return exit_code(ErrorKind::usage);
}
