#pragma once

// PatchSet directories: <dir>/patches/<id>.pgm plus <dir>/index.jsonl with
// one {"path","label","provenance","round","confidence","split"} object per
// line. Hidden ground truth of synthetic pools goes to truth.jsonl, which
// only read_hidden_truth() consumes.

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "pnm.hpp"

namespace defectlab::patch_io {

namespace fs = std::filesystem;

inline void write_patch_set(const fs::path& dir, const PatchSet& set) {
    std::error_code ec;
    fs::create_directories(dir / "patches", ec);
    if (ec) throw IoError("cannot create '" + (dir / "patches").string() + "': " + ec.message());
    std::ofstream index(dir / "index.jsonl", std::ios::trunc);
    if (!index) throw IoError("cannot write '" + (dir / "index.jsonl").string() + "'");
    const bool with_truth = EvaluationAccess::has_hidden_truth(set);
    std::ofstream truth;
    if (with_truth) {
        truth.open(dir / "truth.jsonl", std::ios::trunc);
        if (!truth) throw IoError("cannot write '" + (dir / "truth.jsonl").string() + "'");
    }
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& p = set[i];
        const std::string rel = "patches/" + p.id + ".pgm";
        pnm::write_pgm(dir / rel, p.patch);
        nlohmann::json row;
        row["path"] = rel;
        row["label"] = p.label ? nlohmann::json(*p.label) : nlohmann::json(nullptr);
        row["provenance"] = to_string(p.provenance.origin);
        row["round"] = p.provenance.round;
        row["confidence"] = p.confidence;
        row["split"] = to_string(set.split());
        index << row.dump() << '\n';
        if (with_truth) truth << nlohmann::json{{"path", rel}, {"truth", *EvaluationAccess::hidden_truth(set, i)}}.dump() << '\n';
    }
    if (!index) throw IoError("write failed for '" + (dir / "index.jsonl").string() + "'");
}

// Loads a PatchSet directory. Hidden truth is attached only when
// `with_hidden_truth` is set (evaluation tooling).
inline PatchSet read_patch_set(const fs::path& dir, bool with_hidden_truth = false) {
    std::ifstream index(dir / "index.jsonl");
    if (!index) throw IoError("cannot open '" + (dir / "index.jsonl").string() + "'");
    std::vector<std::optional<ClassId>> truth;
    if (with_hidden_truth && fs::exists(dir / "truth.jsonl")) {
        std::ifstream t(dir / "truth.jsonl");
        std::string line;
        while (std::getline(t, line))
            if (!line.empty()) truth.push_back(nlohmann::json::parse(line).at("truth").get<ClassId>());
    }
    PatchSet set;
    bool first = true;
    std::string line;
    std::size_t n = 0;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        nlohmann::json row;
        try {
            row = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("bad index row in '" + (dir / "index.jsonl").string() + "': " + e.what(),
                             static_cast<int>(n + 1));
        }
        try {
            if (first) {
                set = PatchSet(split_from_string(row.at("split").get<std::string>()));
                first = false;
            }
            const auto rel = row.at("path").get<std::string>();
            LabeledPatch p;
            p.id = fs::path(rel).stem().string();
            p.patch = pnm::read_pgm(dir / rel);
            if (!row.at("label").is_null()) p.label = row.at("label").get<ClassId>();
            p.provenance = {origin_from_string(row.at("provenance").get<std::string>()), row.value("round", 0)};
            p.confidence = row.value("confidence", 1.0);
            std::optional<ClassId> hidden;
            if (n < truth.size()) hidden = truth[n];
            set.add(std::move(p), hidden);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad index row " + std::to_string(n + 1) + " in '" + dir.string() + "': " + e.what());
        }
        ++n;
    }
    return set;
}

}  // namespace defectlab::patch_io
