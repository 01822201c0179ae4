#pragma once

// Run configuration: one JSON document with a section per module. Values
// come from built-in defaults, then the config file, then --set overrides.
// Keys unknown to the defaults are rejected so typos surface as errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "fewshot.hpp"
#include "imaging.hpp"
#include "network.hpp"
#include "pseudolabel.hpp"
#include "random.hpp"
#include "synth.hpp"
#include "train.hpp"

namespace defectlab::config {

using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

inline json defaults() {
    return json::parse(R"({
  "seed": 42,
  "imaging": {
    "blur_kernel": 5, "blur_sigma": 1.0,
    "nlm_h": 10.0, "nlm_template": 7, "nlm_search": 21, "nlm_sigma": 0.0,
    "at_block": 11, "at_c": 2.0,
    "canny_low": 50.0, "canny_high": 150.0,
    "cnn_input": "denoised"
  },
  "synth": {
    "seed": null, "image_side": 64, "noise_sigma": 8.0,
    "pinhole_radius_max": 5, "hole_radius_min": 6, "crack_steps": 40,
    "spatter_blobs_min": 5, "spatter_blobs_max": 15,
    "train_per_class": 200, "test_per_class": 50, "pool_count": 800
  },
  "data": {
    "dir": "", "input_dir": "", "patch_side": 64, "train_fraction": 0.9
  },
  "network": {
    "classes": 4, "spec": null
  },
  "train": {
    "epochs": 10, "batch_size": 32, "optimizer": "adam", "lr": 0.001, "momentum": 0.0,
    "balance": true, "shuffle": true
  },
  "engine": {
    "threshold": 0.5, "max_rounds": 4, "retrain": "fresh", "stop_when_no_additions": true,
    "labeled_fraction": 0.05, "pool": "train-split"
  },
  "transmatch": {
    "mode": "split", "base": ["crack", "spatter"], "novel": ["pinhole", "hole"], "shots": 5,
    "freeze": "last-block+head", "scale": 10.0, "pool_from_train": true, "base_weights": "",
    "fine_tune": { "epochs": 5, "batch_size": 32, "optimizer": "adam", "lr": 0.001, "momentum": 0.0,
                   "shuffle": true }
  },
  "eval": {
    "weights": "", "split": "test"
  }
})");
}

// Sub-objects whose contents are free-form (not checked against defaults).
inline bool free_form(const std::string& path) { return path == "network.spec"; }

namespace detail {

inline void merge(json& base, const json& over, const std::string& prefix) {
    if (!over.is_object()) throw ConfigError("configuration " + (prefix.empty() ? "root" : "'" + prefix + "'") +
                                             " must be a JSON object");
    for (const auto& [key, value] : over.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown configuration key '" + path + "'");
        auto& slot = base[key];
        if (slot.is_object() && !free_form(path))
            merge(slot, value, path);
        else
            slot = value;
    }
}

// --set values are JSON literals when they parse as such, strings otherwise.
inline json parse_value(const std::string& text) {
    auto v = json::parse(text, nullptr, false);
    return v.is_discarded() ? json(text) : v;
}

}  // namespace detail

inline void merge(json& base, const json& over) { detail::merge(base, over, ""); }

/// Applies one "dotted.key=value" override.
inline void apply_set(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    json* node = &cfg;
    std::string walked;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        walked += (walked.empty() ? "" : ".") + part;
        if (part.empty() || !node->is_object() || !node->contains(part))
            throw ConfigError("unknown configuration key '" + walked + "' in override '" + assignment + "'");
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    *node = detail::parse_value(assignment.substr(eq + 1));
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read configuration file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    auto j = json::parse(ss.str(), nullptr, false);
    if (j.is_discarded()) throw ConfigError("configuration file '" + path.string() + "' is not valid JSON");
    return j;
}

/// Defaults, then `path` (skipped when empty), then the overrides. A run
/// manifest is accepted as a config file: its resolved "config" is used.
inline json load(const std::filesystem::path& path, const std::vector<std::string>& sets) {
    json cfg = defaults();
    if (!path.empty()) {
        json file = read_json_file(path);
        if (file.is_object() && file.contains("run_id") && file.contains("config")) file = file.at("config");
        merge(cfg, file);
    }
    for (const auto& s : sets) apply_set(cfg, s);
    return cfg;
}

// Typed lookup of a dotted key; type mismatches become ConfigError.
template <class T>
T get(const json& cfg, const std::string& key) {
    const json* node = &cfg;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(part)) throw ConfigError("missing configuration key '" + key + "'");
        node = &node->at(part);
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    try {
        return node->get<T>();
    } catch (const json::exception&) {
        throw ConfigError("configuration key '" + key + "' has the wrong type: " + node->dump());
    }
}

inline std::uint64_t seed(const json& cfg) { return get<std::uint64_t>(cfg, "seed"); }

// Independent streams derived from the global seed.
struct Seeds {
    std::uint64_t global = 0;
    std::uint64_t synth = 0;
    std::uint64_t split = 0;
    std::uint64_t init = 0;
    std::uint64_t train = 0;
    std::uint64_t episode = 0;

    json to_json() const {
        return {{"global", global}, {"synth", synth}, {"split", split},
                {"init", init},     {"train", train}, {"episode", episode}};
    }
};

inline Seeds seeds(const json& cfg) {
    Seeds s;
    s.global = seed(cfg);
    const auto& sy = cfg.at("synth").at("seed");
    s.synth = sy.is_null() ? s.global : get<std::uint64_t>(cfg, "synth.seed");
    s.split = derive_seed(s.global, 1);
    s.init = derive_seed(s.global, 2);
    s.train = derive_seed(s.global, 3);
    s.episode = derive_seed(s.global, 4);
    return s;
}

inline ClassId class_id(const std::string& name, const std::string& key) {
    try {
        return class_from_name(name);
    } catch (const LabelError&) {
        throw ConfigError("configuration key '" + key + "' names unknown class '" + name + "'");
    }
}

inline std::vector<ClassId> class_list(const json& cfg, const std::string& key) {
    std::vector<ClassId> out;
    for (const auto& n : get<std::vector<std::string>>(cfg, key)) out.push_back(class_id(n, key));
    return out;
}

inline imaging::PipelineConfig imaging_config(const json& cfg) {
    imaging::PipelineConfig p;
    p.blur_kernel = get<int>(cfg, "imaging.blur_kernel");
    p.blur_sigma = get<double>(cfg, "imaging.blur_sigma");
    p.nlm_h = get<double>(cfg, "imaging.nlm_h");
    p.nlm_template = get<int>(cfg, "imaging.nlm_template");
    p.nlm_search = get<int>(cfg, "imaging.nlm_search");
    p.nlm_sigma = get<double>(cfg, "imaging.nlm_sigma");
    p.at_block = get<int>(cfg, "imaging.at_block");
    p.at_c = get<double>(cfg, "imaging.at_c");
    p.canny_low = get<double>(cfg, "imaging.canny_low");
    p.canny_high = get<double>(cfg, "imaging.canny_high");
    try {
        p.cnn_input = imaging::cnn_input_from_string(get<std::string>(cfg, "imaging.cnn_input"));
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    p.validate();
    return p;
}

inline synth::SynthConfig synth_config(const json& cfg) {
    synth::SynthConfig s;
    s.seed = seeds(cfg).synth;
    s.image_side = get<int>(cfg, "synth.image_side");
    s.noise_sigma = get<double>(cfg, "synth.noise_sigma");
    s.pinhole_radius_max = get<int>(cfg, "synth.pinhole_radius_max");
    s.hole_radius_min = get<int>(cfg, "synth.hole_radius_min");
    s.crack_steps = get<int>(cfg, "synth.crack_steps");
    s.spatter_blobs_min = get<int>(cfg, "synth.spatter_blobs_min");
    s.spatter_blobs_max = get<int>(cfg, "synth.spatter_blobs_max");
    s.train_per_class = get<int>(cfg, "synth.train_per_class");
    s.test_per_class = get<int>(cfg, "synth.test_per_class");
    s.pool_count = get<int>(cfg, "synth.pool_count");
    s.validate();
    return s;
}

struct TrainSection {
    nn::TrainConfig train;
    bool balance = true;
};

// `section` is "train" or "transmatch.fine_tune" (which has no class
// balancing); the seed is the derived training stream.
inline TrainSection train_config(const json& cfg, const std::string& section) {
    TrainSection t;
    t.train.epochs = get<int>(cfg, section + ".epochs");
    t.train.batch_size = get<int>(cfg, section + ".batch_size");
    const auto opt = get<std::string>(cfg, section + ".optimizer");
    const auto lr = get<double>(cfg, section + ".lr");
    if (opt == "adam")
        t.train.optimizer = nn::OptimizerConfig::adam(lr);
    else if (opt == "sgd")
        t.train.optimizer = nn::OptimizerConfig::sgd(lr, get<double>(cfg, section + ".momentum"));
    else
        throw ConfigError("'" + section + ".optimizer' must be adam or sgd, got '" + opt + "'");
    t.train.shuffle = get<bool>(cfg, section + ".shuffle");
    t.train.seed = seeds(cfg).train;
    t.balance = section == "train" && get<bool>(cfg, "train.balance");
    t.train.validate();
    return t;
}

inline pseudo::EngineConfig engine_config(const json& cfg) {
    pseudo::EngineConfig e;
    e.threshold = get<double>(cfg, "engine.threshold");
    e.max_rounds = get<int>(cfg, "engine.max_rounds");
    try {
        e.retrain = pseudo::retrain_from_string(get<std::string>(cfg, "engine.retrain"));
    } catch (const ParameterError& err) {
        throw ConfigError(err.what());
    }
    e.stop_when_no_additions = get<bool>(cfg, "engine.stop_when_no_additions");
    e.validate();
    return e;
}

inline fewshot::TransMatchConfig transmatch_config(const json& cfg) {
    fewshot::TransMatchConfig t;
    try {
        t.mode = fewshot::mode_from_string(get<std::string>(cfg, "transmatch.mode"));
        t.freeze = fewshot::freeze_from_string(get<std::string>(cfg, "transmatch.freeze"));
    } catch (const ParameterError& err) {
        throw ConfigError(err.what());
    }
    t.engine = engine_config(cfg);
    t.fine_tune = train_config(cfg, "transmatch.fine_tune").train;
    t.scale = get<double>(cfg, "transmatch.scale");
    t.validate();
    return t;
}

/// The standard network for `side` x `side` inputs, or the explicit
/// "network.spec" description when present.
inline nn::NetworkSpec network_spec(const json& cfg, int side, int classes) {
    const auto& explicit_spec = cfg.at("network").at("spec");
    try {
        auto s = explicit_spec.is_null() ? nn::NetworkSpec::standard(side, classes)
                                         : nn::NetworkSpec::from_json(explicit_spec);
        s.validate();
        return s;
    } catch (const SpecError& e) {
        throw ConfigError(std::string("network configuration: ") + e.what());
    }
}

}  // namespace defectlab::config
