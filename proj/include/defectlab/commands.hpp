#pragma once

// Command implementations behind the defectlab executable. Each command
// resolves its configuration, creates a run directory, writes the manifest
// before any training starts and records the outcome in status.json.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "config.hpp"
#include "dataset.hpp"
#include "error.hpp"
#include "fewshot.hpp"
#include "imaging.hpp"
#include "log.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "patch_io.hpp"
#include "pnm.hpp"
#include "pseudolabel.hpp"
#include "synth.hpp"
#include "train.hpp"
#include "voc.hpp"
#include "weights_io.hpp"

namespace defectlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// FNV-1a, 64 bit.
class Digest {
public:
    Digest& update(std::string_view bytes) {
        for (unsigned char c : bytes) {
            h_ ^= c;
            h_ *= 0x100000001b3ULL;
        }
        return *this;
    }
    std::uint64_t value() const noexcept { return h_; }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
        return buf;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string file_digest(const fs::path& path) { return Digest().update(read_bytes(path)).hex(); }

// Digest over relative paths and contents of every regular file, in
// lexicographic path order.
inline std::string tree_digest(const fs::path& dir) {
    std::vector<fs::path> files;
    std::error_code ec;
    for (fs::recursive_directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec))
        if (it->is_regular_file()) files.push_back(fs::relative(it->path(), dir));
    if (ec) throw IoError("cannot list '" + dir.string() + "': " + ec.message());
    std::sort(files.begin(), files.end());
    Digest d;
    for (const auto& f : files) {
        d.update(f.generic_string()).update(std::string_view("\0", 1));
        d.update(read_bytes(dir / f));
    }
    return d.hex();
}

struct Options {
    std::string command;
    fs::path config;
    std::vector<std::string> sets;
    fs::path out = ".";
    fs::path run_dir;  // explicit run directory; empty: <out>/runs/<timestamp>-<digest>
    fs::path input;    // preprocess input directory
    fs::path weights;  // eval weights
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

// Written once, before training; later changes go to status.json.
struct RunManifest {
    std::string run_id;
    std::string command;
    std::string timestamp;
    json config;
    json seeds;
    std::map<std::string, std::string> inputs;  // name -> digest
    std::vector<std::string> artifacts;         // relative to the run directory
    json versions;

    json to_json() const {
        return {{"run_id", run_id}, {"command", command}, {"timestamp", timestamp}, {"config", config},
                {"seeds", seeds},   {"inputs", inputs},   {"artifacts", artifacts}, {"versions", versions}};
    }
};

inline json module_versions() {
    return {{"defectlab", config::kVersion},
            {"modules",
             {{"imaging", "1"}, {"dataset", "1"}, {"network", "1"}, {"pseudolabel", "1"}, {"fewshot", "1"},
              {"metrics", "1"}, {"cli", "1"}}},
            {"weights_format", "TMW1"}};
}

// The run in progress, kept by value so a failure caught after the Run
// object is gone can still be recorded in its status file.
struct ActiveRun {
    fs::path dir;
    std::string run_id;
};

inline std::optional<ActiveRun>& active_run() {
    static std::optional<ActiveRun> run;
    return run;
}

inline void write_status(const fs::path& dir, const std::string& run_id, const std::string& state, int exit_code,
                         const std::string& message, const json& extra) {
    json s{{"run_id", run_id}, {"state", state}, {"updated", utc_timestamp()}};
    if (state != "running") s["exit_code"] = exit_code;
    if (!message.empty()) s["message"] = message;
    if (extra.is_object())
        for (const auto& [k, v] : extra.items()) s[k] = v;
    metrics::detail::write_text(dir / "status.json", s.dump(2) + "\n");
}

class Run {
public:
    Run(const Options& opt, json cfg, std::map<std::string, std::string> inputs, std::vector<std::string> artifacts) {
        manifest_.command = opt.command;
        manifest_.timestamp = utc_timestamp();
        manifest_.seeds = config::seeds(cfg).to_json();
        manifest_.config = std::move(cfg);
        manifest_.inputs = std::move(inputs);
        manifest_.artifacts = std::move(artifacts);
        manifest_.versions = module_versions();
        Digest d;
        d.update(opt.command).update(manifest_.config.dump());
        for (const auto& [k, v] : manifest_.inputs) d.update(k).update(v);
        manifest_.run_id = manifest_.timestamp + "-" + d.hex().substr(0, 8);
        dir_ = opt.run_dir.empty() ? opt.out / "runs" / manifest_.run_id : opt.run_dir;
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create run directory '" + dir_.string() + "': " + ec.message());
        metrics::detail::write_text(dir_ / "manifest.json", manifest_.to_json().dump(2) + "\n");
        status("running");
        active_run() = ActiveRun{dir_, manifest_.run_id};
    }

    const fs::path& dir() const noexcept { return dir_; }
    const RunManifest& manifest() const noexcept { return manifest_; }
    const json& config() const noexcept { return manifest_.config; }

    void status(const std::string& state, int exit_code = 0, const std::string& message = {}, json extra = {}) const {
        write_status(dir_, manifest_.run_id, state, exit_code, message, extra);
        if (state != "running") active_run().reset();
    }

private:
    RunManifest manifest_;
    fs::path dir_;
};

// ---------------------------------------------------------------- data

struct Data {
    PatchSet train{Split::train};
    PatchSet test{Split::test};
    PatchSet pool{Split::pool};
    std::map<std::string, std::string> digests;
};

// data.dir holds train/, test/ and optionally pool/ PatchSet directories;
// an empty data.dir synthesizes the sets in memory from the synth section.
inline Data load_data(const json& cfg, bool need_pool = false) {
    Data d;
    const auto dir = config::get<std::string>(cfg, "data.dir");
    if (dir.empty()) {
        const auto sc = config::synth_config(cfg);
        if (!need_pool) {
            auto s = sc;
            s.pool_count = 0;
            auto data = synth::synthesize(s);
            d.train = std::move(data.train);
            d.test = std::move(data.test);
        } else {
            auto data = synth::synthesize(sc);
            d.train = std::move(data.train);
            d.test = std::move(data.test);
            d.pool = std::move(data.pool);
        }
        d.digests["synthetic"] = Digest().update(cfg.at("synth").dump()).update(std::to_string(sc.seed)).hex();
        return d;
    }
    const fs::path root(dir);
    if (!fs::is_directory(root)) throw IoError("data directory '" + root.string() + "' does not exist");
    for (auto [name, set] : {std::pair<const char*, PatchSet*>{"train", &d.train}, {"test", &d.test}}) {
        if (!fs::exists(root / name / "index.jsonl")) continue;
        *set = patch_io::read_patch_set(root / name);
        d.digests[name] = tree_digest(root / name);
    }
    if (need_pool && fs::exists(root / "pool" / "index.jsonl")) {
        d.pool = patch_io::read_patch_set(root / "pool", true);
        d.digests["pool"] = tree_digest(root / "pool");
    }
    return d;
}

inline int patch_side(const Data& d, const json& cfg) {
    for (const auto* s : {&d.train, &d.test, &d.pool})
        if (!s->empty()) return s->patches().front().patch.width();
    return config::get<int>(cfg, "data.patch_side");
}

inline std::vector<std::string> default_class_names(int k) {
    std::vector<std::string> names;
    for (int c = 0; c < k; ++c) names.push_back(class_name(c));
    return names;
}

inline void write_history(const fs::path& path, const nn::History& h) {
    std::string csv = "epoch,loss,accuracy\n";
    char buf[96];
    for (std::size_t e = 0; e < h.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e + 1, h[e].loss, h[e].accuracy);
        csv += buf;
    }
    metrics::detail::write_text(path, csv);
}

inline void evaluate_and_emit(const nn::NetworkSpec& spec, const nn::NetworkParams& params, const PatchSet& test,
                              const fs::path& dir) {
    const int k = spec.classes();
    const auto ev = nn::evaluate(spec, params, test);
    const auto m = metrics::confusion(ev.truths, ev.predictions, k);
    metrics::emit(metrics::report(m, ev.mean_loss, default_class_names(k)), m, dir);
}

// ---------------------------------------------------------------- commands

inline int cmd_synth(const Options& opt, const json& cfg) {
    const auto sc = config::synth_config(cfg);
    Run run(opt, cfg, {}, {"train/index.jsonl", "test/index.jsonl", "pool/index.jsonl", "pool/truth.jsonl"});
    const auto data = synth::synthesize(sc);
    patch_io::write_patch_set(run.dir() / "train", data.train);
    patch_io::write_patch_set(run.dir() / "test", data.test);
    patch_io::write_patch_set(run.dir() / "pool", data.pool);
    run.status("completed", 0, {},
               {{"counts", {{"train", data.train.size()}, {"test", data.test.size()}, {"pool", data.pool.size()}}},
                {"digests",
                 {{"train", tree_digest(run.dir() / "train")},
                  {"test", tree_digest(run.dir() / "test")},
                  {"pool", tree_digest(run.dir() / "pool")}}}});
    return 0;
}

// Finds the raster referenced by an annotation: the <filename> next to the
// XML file, else the XML stem with a .pgm or .ppm extension.
inline fs::path locate_image(const fs::path& xml, const std::string& filename) {
    std::vector<fs::path> candidates;
    if (!filename.empty()) candidates.push_back(xml.parent_path() / filename);
    for (const char* ext : {".pgm", ".ppm"}) candidates.push_back(fs::path(xml).replace_extension(ext));
    for (const auto& c : candidates)
        if (fs::is_regular_file(c)) return c;
    throw IoError("no image found for annotation '" + xml.string() + "'");
}

inline int cmd_preprocess(const Options& opt, const json& cfg) {
    const auto pipeline = config::imaging_config(cfg);
    const int side = config::get<int>(cfg, "data.patch_side");
    const double train_fraction = config::get<double>(cfg, "data.train_fraction");
    if (!(train_fraction > 0 && train_fraction <= 1)) throw ConfigError("data.train_fraction must lie in (0, 1]");
    const fs::path input = opt.input.empty() ? fs::path(config::get<std::string>(cfg, "data.input_dir")) : opt.input;
    if (input.empty()) throw ConfigError("preprocess needs an input directory (--input or data.input_dir)");
    if (!fs::is_directory(input)) throw IoError("input directory '" + input.string() + "' does not exist");

    std::vector<fs::path> xmls;
    for (const auto& e : fs::directory_iterator(input))
        if (e.is_regular_file() && e.path().extension() == ".xml") xmls.push_back(e.path());
    std::sort(xmls.begin(), xmls.end());

    Run run(opt, cfg, {{"input", tree_digest(input)}}, {"train/index.jsonl", "test/index.jsonl"});
    const auto labels = default_label_map();
    PatchSet all(Split::train);
    std::size_t boxes = 0;
    for (const auto& xml : xmls) {
        auto anns = voc::parse_voc_xml(read_bytes(xml), labels);
        boxes += anns.size();
        if (anns.empty()) continue;
        // Annotations carry <filename>; patch ids use the XML stem instead.
        const auto filename = anns.front().image_id;
        for (auto& a : anns) a.image_id = xml.stem().string();
        const auto image_path = locate_image(xml, filename);
        GrayImage gray;
        RgbImage rgb;
        const bool is_gray = pnm::read_any(image_path, gray, rgb);
        const auto processed = is_gray ? imaging::preprocess(gray, pipeline) : imaging::preprocess(rgb, pipeline);
        for (auto& p : extract_patches(processed, anns, side)) all.add(std::move(p));
    }
    if (xmls.empty()) log::warn("no annotation files in '" + input.string() + "'; writing empty sets");

    PatchSet train(Split::train), test(Split::test);
    if (!all.empty() && train_fraction < 1) {
        std::tie(train, test) = split(all, {train_fraction, 1 - train_fraction}, config::seeds(cfg).split);
    } else {
        train = all;
    }
    patch_io::write_patch_set(run.dir() / "train", train);
    patch_io::write_patch_set(run.dir() / "test", test);
    run.status("completed", 0, {},
               {{"counts", {{"annotations", boxes}, {"patches", all.size()}, {"train", train.size()},
                            {"test", test.size()}}}});
    return 0;
}

inline nn::TrainConfig with_weights(nn::TrainConfig t, bool balance, const PatchSet& set, int classes) {
    if (balance) t.class_weights = balanced_weights(set.class_counts(classes)).weights;
    return t;
}

inline int cmd_train(const Options& opt, const json& cfg) {
    const auto tc = config::train_config(cfg, "train");
    const auto seeds = config::seeds(cfg);
    auto data = load_data(cfg);
    const auto spec = config::network_spec(cfg, patch_side(data, cfg), config::get<int>(cfg, "network.classes"));
    Run run(opt, cfg, data.digests, {"weights.tmw", "history.csv", "report.json", "metrics.csv", "confusion.csv"});
    if (data.train.empty()) throw InputError("training set is empty");
    auto params = nn::build(spec, seeds.init);
    const auto history = nn::train(spec, params, data.train, with_weights(tc.train, tc.balance, data.train, spec.classes()));
    nn::save_weights(run.dir() / "weights.tmw", spec, params);
    write_history(run.dir() / "history.csv", history);
    evaluate_and_emit(spec, params, data.test, run.dir());
    run.status("completed");
    return 0;
}

// Labeled / unlabeled sets for pseudo-labeling. "train-split" keeps a
// stratified labeled_fraction of the train set and hides the labels of the
// rest; "pool" uses the whole train set and the separate pool.
inline std::pair<PatchSet, PatchSet> pseudo_sets(const json& cfg, const Data& data) {
    const auto source = config::get<std::string>(cfg, "engine.pool");
    if (source == "pool") return {data.train, data.pool};
    if (source != "train-split") throw ConfigError("engine.pool must be train-split or pool, got '" + source + "'");
    const double f = config::get<double>(cfg, "engine.labeled_fraction");
    if (!(f > 0 && f < 1)) throw ConfigError("engine.labeled_fraction must lie in (0, 1)");
    if (data.train.empty()) return {PatchSet(Split::train), PatchSet(Split::pool)};
    auto [labeled, rest] = split(data.train, {f, 1 - f}, config::seeds(cfg).split);
    PatchSet pool(Split::pool);
    for (const auto& p : rest.patches()) {
        LabeledPatch u = p;
        const auto truth = u.label;
        u.label.reset();
        pool.add(std::move(u), truth);
    }
    return {std::move(labeled), std::move(pool)};
}

inline void write_pseudo_labels(const fs::path& path, const std::vector<pseudo::PseudoLabel>& labels) {
    std::string csv = "patch_id,class,confidence,round\n";
    char buf[64];
    for (const auto& l : labels) {
        std::snprintf(buf, sizeof buf, ",%.17g,%d\n", l.confidence, l.round);
        csv += l.patch_id + "," + class_name(l.assigned_class) + buf;
    }
    metrics::detail::write_text(path, csv);
}

inline int cmd_pseudolabel(const Options& opt, const json& cfg) {
    const auto tc = config::train_config(cfg, "train");
    const auto ec = config::engine_config(cfg);
    const auto seeds = config::seeds(cfg);
    auto data = load_data(cfg, config::get<std::string>(cfg, "engine.pool") == "pool");
    const auto spec = config::network_spec(cfg, patch_side(data, cfg), config::get<int>(cfg, "network.classes"));
    auto [labeled, pool] = pseudo_sets(cfg, data);
    Run run(opt, cfg, data.digests,
            {"rounds/rounds.csv", "pseudo_labels.csv", "weights.tmw", "report.json", "metrics.csv", "confusion.csv"});
    if (labeled.empty()) throw InputError("labeled set is empty");
    pseudo::CnnLearner learner(spec, tc.train, tc.balance, ec.retrain, seeds.init);
    const auto res = pseudo::run(labeled, pool, data.test, learner, ec);
    const auto names = default_class_names(spec.classes());
    pseudo::write_reports(run.dir() / "rounds", res.rounds, names);
    write_pseudo_labels(run.dir() / "pseudo_labels.csv", res.absorbed);
    nn::save_weights(run.dir() / "weights.tmw", spec, learner.params());
    evaluate_and_emit(spec, learner.params(), data.test, run.dir());
    run.status("completed", 0, {},
               {{"rounds", res.rounds.size()},
                {"labeled", labeled.size()},
                {"absorbed", res.absorbed.size()},
                {"final_refit", res.final_refit}});
    return 0;
}

inline std::vector<std::string> names_of(const std::vector<ClassId>& ids) {
    std::vector<std::string> out;
    for (auto c : ids) out.push_back(class_name(c));
    return out;
}

inline int cmd_transmatch(const Options& opt, const json& cfg) {
    const auto tm = config::transmatch_config(cfg);
    const auto tc = config::train_config(cfg, "train");
    const auto seeds = config::seeds(cfg);
    const int shots = config::get<int>(cfg, "transmatch.shots");
    std::vector<ClassId> base, novel;
    if (tm.mode == fewshot::Mode::split) {
        base = config::class_list(cfg, "transmatch.base");
        novel = config::class_list(cfg, "transmatch.novel");
    } else {
        for (int c = 0; c < kDefectClassCount; ++c) base.push_back(c);
        novel = base;
    }
    auto data = load_data(cfg);
    const int side = patch_side(data, cfg);
    const auto base_weights = config::get<std::string>(cfg, "transmatch.base_weights");
    auto inputs = data.digests;
    if (!base_weights.empty()) inputs["base_weights"] = file_digest(base_weights);
    Run run(opt, cfg, inputs,
            {"episode.json", "rounds/rounds.csv", "fine_tune_history.csv", "weights.tmw", "report.json", "metrics.csv",
             "confusion.csv"});

    // Feature extractor: loaded, or trained on the base classes.
    nn::NetworkSpec spec;
    nn::NetworkParams params;
    if (!base_weights.empty()) {
        auto wf = nn::load_weights(base_weights);
        spec = wf.spec;
        params = std::move(wf.params);
        if (spec.input_shape != Shape{side, side, 1})
            throw FormatError("base weights expect input " + shape_string(spec.input_shape));
    } else {
        const auto base_train = tm.mode == fewshot::Mode::split ? fewshot::remap_classes(data.train, base) : data.train;
        if (base_train.empty()) throw InputError("no training patches for the base classes");
        spec = config::network_spec(cfg, side, static_cast<int>(base.size()));
        params = nn::build(spec, seeds.init);
        nn::train(spec, params, base_train, with_weights(tc.train, tc.balance, base_train, spec.classes()));
        nn::save_weights(run.dir() / "base_weights.tmw", spec, params);
    }

    const auto episode = fewshot::make_episode(tm.mode, base, novel, shots, data.train, data.test, seeds.episode,
                                               config::get<bool>(cfg, "transmatch.pool_from_train"));
    metrics::detail::write_text(run.dir() / "episode.json",
                                json{{"mode", to_string(tm.mode)},
                                     {"base", names_of(episode.base_classes)},
                                     {"novel", names_of(episode.novel_classes)},
                                     {"shots", episode.shots},
                                     {"support", episode.support.size()},
                                     {"pool", episode.pool.size()},
                                     {"query", episode.query.size()}}
                                        .dump(2) +
                                    "\n");
    const auto res = fewshot::transmatch_run(episode, spec, params, tm);
    pseudo::write_reports(run.dir() / "rounds", res.engine.rounds, names_of(novel));
    write_history(run.dir() / "fine_tune_history.csv", res.fine_tune_history);
    nn::save_weights(run.dir() / "weights.tmw", nn::WeightFile{spec, res.params, {fewshot::head_to_group(res.head)}});
    if (res.final_report) metrics::emit(*res.final_report, res.confusion, run.dir());
    run.status("completed", 0, {},
               {{"absorbed", res.engine.absorbed.size()},
                {"query_accuracy", res.final_report ? json(res.final_report->accuracy) : json(nullptr)}});
    return 0;
}

inline int cmd_eval(const Options& opt, const json& cfg) {
    const fs::path weights = opt.weights.empty() ? fs::path(config::get<std::string>(cfg, "eval.weights")) : opt.weights;
    if (weights.empty()) throw ConfigError("eval needs a weight file (--weights or eval.weights)");
    const auto which = config::get<std::string>(cfg, "eval.split");
    if (which != "test" && which != "train") throw ConfigError("eval.split must be test or train, got '" + which + "'");
    auto data = load_data(cfg);
    const auto& set = which == "test" ? data.test : data.train;
    const int side = patch_side(data, cfg);
    auto inputs = data.digests;
    inputs["weights"] = file_digest(weights);
    Run run(opt, cfg, inputs, {"report.json", "metrics.csv", "confusion.csv"});
    const auto raw = nn::load_weights(weights);
    if (const auto* g = raw.group("imprinted_head")) {
        if (raw.spec.input_shape != Shape{side, side, 1})
            throw FormatError("weight file '" + weights.string() + "' expects input " +
                              shape_string(raw.spec.input_shape));
        const auto head = fewshot::head_from_group(*g);
        PatchSet query(set.split());
        for (const auto& p : set.patches())
            if (p.label && std::find(head.classes.begin(), head.classes.end(), *p.label) != head.classes.end())
                query.add(p);
        const auto [m, rep] = fewshot::evaluate_query(raw.spec, raw.params, head, query);
        if (rep) metrics::emit(*rep, m, run.dir());
    } else {
        const auto spec = config::network_spec(cfg, side, config::get<int>(cfg, "network.classes"));
        const auto wf = nn::load_weights(weights, spec);
        evaluate_and_emit(spec, wf.params, set, run.dir());
    }
    run.status("completed");
    return 0;
}

inline const std::map<std::string, std::function<int(const Options&, const json&)>>& commands() {
    static const std::map<std::string, std::function<int(const Options&, const json&)>> table{
        {"synth", cmd_synth},         {"preprocess", cmd_preprocess}, {"train", cmd_train},
        {"pseudolabel", cmd_pseudolabel}, {"transmatch", cmd_transmatch}, {"eval", cmd_eval}};
    return table;
}

// Marks the run in progress (if any) as failed.
inline int fail(const std::string& message, int code) {
    if (auto& r = active_run()) {
        try {
            write_status(r->dir, r->run_id, "failed", code, message, {});
        } catch (const Error&) {
        }
        r.reset();
    }
    return code;
}

/// Loads the configuration and runs `opt.command`; library errors are
/// reported on `err` and mapped to their exit codes.
inline int run_command(const Options& opt, std::ostream& err) {
    active_run().reset();
    try {
        const auto it = commands().find(opt.command);
        if (it == commands().end()) throw ConfigError("unknown command '" + opt.command + "'");
        const auto cfg = config::load(opt.config, opt.sets);
        return it->second(opt, cfg);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return fail(e.what(), exit_code(e));
    }
}

}  // namespace defectlab::cli
