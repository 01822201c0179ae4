#pragma once

// Weight file layout:
//   "TMW1" | u32 little-endian header length | JSON header | f64 LE payload
// The header carries the network description, the initialization seed,
// dtype "f64" and the ordered tensor list; the payload holds the tensors'
// values back to back in that order. Extra named groups (an imprinted
// classifier head, for example) follow the network tensors.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "network.hpp"

namespace defectlab::nn {

inline constexpr char kWeightMagic[4] = {'T', 'M', 'W', '1'};

struct ParamGroup {
    std::string name;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<Tensor> tensors;
};

struct WeightFile {
    NetworkSpec spec;
    NetworkParams params;
    std::vector<ParamGroup> groups;

    const ParamGroup* group(const std::string& name) const {
        for (const auto& g : groups)
            if (g.name == name) return &g;
        return nullptr;
    }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void put_tensor(std::string& out, const Tensor& t) {
    for (double d : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

}  // namespace detail

inline std::string encode_weights(const WeightFile& wf) {
    check_params(wf.spec, wf.params);
    nlohmann::json header;
    header["format"] = "TMW1";
    header["dtype"] = "f64";
    header["seed"] = wf.params.seed;
    header["spec"] = wf.spec.to_json();
    auto& tensors = header["tensors"] = nlohmann::json::array();
    for (std::size_t i = 0; i < wf.params.layers.size(); ++i) {
        const auto& l = wf.params.layers[i];
        if (l.empty()) continue;
        tensors.push_back({{"group", "network"}, {"layer", i}, {"role", "weight"}, {"shape", l.weight.shape()}});
        tensors.push_back({{"group", "network"}, {"layer", i}, {"role", "bias"}, {"shape", l.bias.shape()}});
    }
    auto& groups = header["groups"] = nlohmann::json::array();
    for (const auto& g : wf.groups) {
        groups.push_back({{"name", g.name}, {"meta", g.meta}});
        for (std::size_t i = 0; i < g.tensors.size(); ++i)
            tensors.push_back({{"group", g.name}, {"index", i}, {"shape", g.tensors[i].shape()}});
    }
    const std::string text = header.dump();
    std::string out(kWeightMagic, 4);
    const auto len = static_cast<std::uint32_t>(text.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    out += text;
    for (const auto& l : wf.params.layers) {
        if (l.empty()) continue;
        detail::put_tensor(out, l.weight);
        detail::put_tensor(out, l.bias);
    }
    for (const auto& g : wf.groups)
        for (const auto& t : g.tensors) detail::put_tensor(out, t);
    return out;
}

/// Parses a weight file image. Any inconsistency (magic, truncation, header
/// shapes vs. payload length, shapes vs. the embedded network description)
/// raises FormatError before anything is returned.
inline WeightFile decode_weights(const std::string& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kWeightMagic, 4) != 0)
        throw FormatError("not a TMW1 weight file (bad magic)");
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t len = u[4] | (u[5] << 8) | (u[6] << 16) | (static_cast<std::uint32_t>(u[7]) << 24);
    if (bytes.size() < 8ull + len) throw FormatError("truncated weight file header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(8, len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("weight file header is not valid JSON: ") + e.what());
    }
    WeightFile wf;
    try {
        if (header.at("dtype").get<std::string>() != "f64") throw FormatError("unsupported dtype in weight file");
        wf.spec = NetworkSpec::from_json(header.at("spec"));
        wf.spec.validate();
        wf.params.seed = header.at("seed").get<std::uint64_t>();
        wf.params.layers.resize(wf.spec.layers.size());
        for (const auto& g : header.value("groups", nlohmann::json::array()))
            wf.groups.push_back({g.at("name").get<std::string>(), g.value("meta", nlohmann::json::object()), {}});

        std::size_t offset = 8ull + len;
        const std::size_t payload = bytes.size() - offset;
        std::size_t declared = 0;
        for (const auto& t : header.at("tensors")) declared += shape_size(t.at("shape").get<Shape>()) * 8;
        if (declared != payload)
            throw FormatError("weight payload has " + std::to_string(payload) + " bytes, header declares " +
                              std::to_string(declared));
        for (const auto& t : header.at("tensors")) {
            const auto shape = t.at("shape").get<Shape>();
            std::vector<double> values(shape_size(shape));
            for (auto& v : values) {
                v = std::bit_cast<double>(detail::get_u64(u + offset));
                offset += 8;
            }
            Tensor tensor(shape, std::move(values));
            const auto group = t.at("group").get<std::string>();
            if (group == "network") {
                const auto layer = t.at("layer").get<std::size_t>();
                if (layer >= wf.params.layers.size()) throw FormatError("tensor refers to missing layer");
                (t.at("role").get<std::string>() == "weight" ? wf.params.layers[layer].weight
                                                             : wf.params.layers[layer].bias) = std::move(tensor);
            } else {
                auto it = std::find_if(wf.groups.begin(), wf.groups.end(), [&](const auto& g) { return g.name == group; });
                if (it == wf.groups.end()) throw FormatError("tensor refers to undeclared group '" + group + "'");
                it->tensors.push_back(std::move(tensor));
            }
        }
        check_params(wf.spec, wf.params);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed weight file header: ") + e.what());
    } catch (const SpecError& e) {
        throw FormatError(std::string("weight file inconsistent with its network: ") + e.what());
    } catch (const InputError& e) {
        throw FormatError(std::string("weight file tensor error: ") + e.what());
    }
    return wf;
}

inline void save_weights(const std::filesystem::path& path, const WeightFile& wf) {
    const auto bytes = encode_weights(wf);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void save_weights(const std::filesystem::path& path, const NetworkSpec& spec, const NetworkParams& params) {
    save_weights(path, WeightFile{spec, params, {}});
}

inline WeightFile load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open weight file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_weights(ss.str());
}

// Loads and requires the stored network to equal `expected`.
inline WeightFile load_weights(const std::filesystem::path& path, const NetworkSpec& expected) {
    auto wf = load_weights(path);
    if (!(wf.spec == expected)) {
        std::string where = "input shape or embedding layer";
        if (wf.spec.layers.size() != expected.layers.size()) {
            where = "layer count " + std::to_string(wf.spec.layers.size()) + " vs " +
                    std::to_string(expected.layers.size());
        } else {
            for (std::size_t i = 0; i < expected.layers.size(); ++i)
                if (!(wf.spec.layers[i] == expected.layers[i])) {
                    where = "layer " + std::to_string(i) + " (" + to_string(wf.spec.layers[i].kind) + ")";
                    break;
                }
        }
        throw FormatError("weight file '" + path.string() + "' was saved for a different network: " + where + " differs");
    }
    return wf;
}

}  // namespace defectlab::nn
