#pragma once

// Network configurations in the "[64, 64, 'M', 128, ...]" vector notation.

#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pcarch/errors.hpp"

namespace pcarch {

struct Conv {
    std::size_t width = 0;
    friend bool operator==(const Conv&, const Conv&) = default;
};
struct MaxPool {
    friend bool operator==(const MaxPool&, const MaxPool&) = default;
};
using Token = std::variant<Conv, MaxPool>;

inline bool is_conv(const Token& t) { return std::holds_alternative<Conv>(t); }

struct InputShape {
    std::size_t h = 32;
    std::size_t w = 32;
    std::size_t c = 3;
    friend bool operator==(const InputShape&, const InputShape&) = default;
};

struct ArchConfig {
    std::vector<Token> tokens;
    std::size_t classes = 10;
    InputShape input;
    bool batch_norm = true;

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;

    std::vector<std::size_t> conv_widths() const {
        std::vector<std::size_t> w;
        for (const auto& t : tokens)
            if (auto* c = std::get_if<Conv>(&t)) w.push_back(c->width);
        return w;
    }
    std::size_t conv_count() const { return conv_widths().size(); }
};

/// Spatial geometry of one conv layer as the net sees it.
struct ConvGeometry {
    std::size_t in_channels;
    std::size_t out_channels;
    std::size_t h;  // input == output spatial size (3x3, stride 1, pad 1)
    std::size_t w;
    bool pool_after;  // a MaxPool immediately follows
    std::size_t pools_after = 0;
};

struct Geometry {
    std::vector<ConvGeometry> convs;
    std::size_t out_h = 0, out_w = 0, out_c = 0;  // after the last token
    std::size_t flat_dim() const { return out_h * out_w * out_c; }
};

/// Throws ShapeError/ArgumentError when the config violates its invariants.
inline Geometry geometry(const ArchConfig& cfg) {
    if (cfg.tokens.empty() || !is_conv(cfg.tokens.front()))
        throw ArgumentError(cfg.tokens.empty() ? "config has no layers"
                                               : "config must start with a conv layer, not 'M'");
    if (cfg.classes == 0) throw ArgumentError("config needs at least one output class");
    if (cfg.input.h == 0 || cfg.input.w == 0 || cfg.input.c == 0)
        throw ArgumentError("config input shape has a zero dimension");
    Geometry g;
    std::size_t h = cfg.input.h, w = cfg.input.w, c = cfg.input.c;
    for (std::size_t i = 0; i < cfg.tokens.size(); ++i) {
        if (const auto* conv = std::get_if<Conv>(&cfg.tokens[i])) {
            if (conv->width == 0)
                throw ArgumentError("conv layer " + std::to_string(g.convs.size()) + " has width 0");
            g.convs.push_back({c, conv->width, h, w, false});
            c = conv->width;
        } else {
            if (h < 2 || w < 2)
                throw ShapeError("max-pool at token " + std::to_string(i) + " sees spatial size " +
                                 std::to_string(h) + "x" + std::to_string(w) + " and would collapse it to 0");
            h /= 2;
            w /= 2;
            g.convs.back().pool_after = true;
            ++g.convs.back().pools_after;
        }
    }
    g.out_h = h;
    g.out_w = w;
    g.out_c = c;
    return g;
}

inline void validate(const ArchConfig& cfg) { (void)geometry(cfg); }

inline std::string to_vector_notation(const std::vector<Token>& tokens) {
    std::string s = "[";
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ", ";
        if (const auto* c = std::get_if<Conv>(&tokens[i])) s += std::to_string(c->width);
        else s += "'M'";
    }
    return s + "]";
}

/// Parses "[64, 64, 'M', 128]"; accepts ', " or bare M and optional brackets.
inline std::vector<Token> parse_vector_notation(const std::string& text) {
    std::vector<Token> out;
    std::string item;
    auto flush = [&] {
        std::string t;
        for (char ch : item)
            if (!std::isspace(static_cast<unsigned char>(ch)) && ch != '\'' && ch != '"' && ch != '`')
                t += ch;
        item.clear();
        if (t.empty()) return;
        if (t == "M" || t == "m") {
            out.emplace_back(MaxPool{});
            return;
        }
        for (char ch : t)
            if (!std::isdigit(static_cast<unsigned char>(ch)))
                throw ArgumentError("bad token '" + t + "' in config vector");
        out.emplace_back(Conv{std::stoul(t)});
    };
    for (char ch : text) {
        if (ch == '[' || ch == ']') continue;
        if (ch == ',') flush();
        else item += ch;
    }
    flush();
    return out;
}

inline nlohmann::json tokens_to_json(const std::vector<Token>& tokens) {
    auto arr = nlohmann::json::array();
    for (const auto& t : tokens) {
        if (const auto* c = std::get_if<Conv>(&t)) arr.push_back(c->width);
        else arr.push_back("M");
    }
    return arr;
}

inline std::vector<Token> tokens_from_json(const nlohmann::json& arr) {
    if (!arr.is_array()) throw ArgumentError("\"layers\" must be an array");
    std::vector<Token> out;
    for (const auto& v : arr) {
        if (v.is_number_integer() || v.is_number_unsigned()) {
            const auto w = v.get<long long>();
            if (w < 0) throw ArgumentError("negative conv width in config");
            out.emplace_back(Conv{static_cast<std::size_t>(w)});
        } else if (v.is_string() && (v.get<std::string>() == "M" || v.get<std::string>() == "m")) {
            out.emplace_back(MaxPool{});
        } else {
            throw ArgumentError("config layer entries must be integers or \"M\", got " + v.dump());
        }
    }
    return out;
}

inline nlohmann::json to_json(const ArchConfig& cfg) {
    nlohmann::json j;
    j["input"] = {cfg.input.h, cfg.input.w, cfg.input.c};
    j["layers"] = tokens_to_json(cfg.tokens);
    j["classes"] = cfg.classes;
    if (!cfg.batch_norm) j["batch_norm"] = false;
    return j;
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("layers"))
        throw ArgumentError("config JSON needs a \"layers\" array");
    ArchConfig cfg;
    cfg.tokens = tokens_from_json(j.at("layers"));
    if (j.contains("input")) {
        const auto& in = j.at("input");
        if (!in.is_array() || in.size() != 3) throw ArgumentError("\"input\" must be [H, W, C]");
        cfg.input = {in[0].get<std::size_t>(), in[1].get<std::size_t>(), in[2].get<std::size_t>()};
    }
    if (j.contains("classes")) cfg.classes = j.at("classes").get<std::size_t>();
    if (j.contains("batch_norm")) cfg.batch_norm = j.at("batch_norm").get<bool>();
    validate(cfg);
    return cfg;
}

inline ArchConfig load_arch(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open config " + path.string());
    try {
        return arch_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(path.string() + ": " + e.what());
    }
}

inline void save_arch(const ArchConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    out << to_json(cfg).dump(2) << '\n';
}

}  // namespace pcarch
