#pragma once

// Round-based pseudo-labeling. Each round trains a model on the labeled set
// (human labels plus everything absorbed so far), predicts the patches still
// in the unlabeled pool, and moves every prediction whose top probability
// strictly exceeds the threshold into the labeled set. Absorbed labels are
// never revisited.

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "random.hpp"
#include "train.hpp"

namespace defectlab::pseudo {

enum class Retrain { fresh, continue_training };

inline std::string to_string(Retrain r) { return r == Retrain::fresh ? "fresh" : "continue"; }

inline Retrain retrain_from_string(const std::string& s) {
    if (s == "fresh") return Retrain::fresh;
    if (s == "continue") return Retrain::continue_training;
    throw ParameterError("unknown retrain mode '" + s + "' (expected fresh|continue)");
}

struct EngineConfig {
    double threshold = 0.5;  // strict: confidence must exceed it
    int max_rounds = 4;
    Retrain retrain = Retrain::fresh;
    bool stop_when_no_additions = true;

    void validate() const {
        if (!(threshold > 0 && threshold < 1)) throw ParameterError("threshold must lie in (0, 1)");
        if (max_rounds < 1) throw ParameterError("max_rounds must be >= 1");
    }
};

struct PseudoLabel {
    std::size_t pool_index = 0;  // position in the pool passed to select_confident
    std::string patch_id;
    ClassId assigned_class = 0;
    double confidence = 0;
    int round = 0;
};

/// Keeps exactly the predictions whose top probability is strictly greater
/// than `threshold`; the class is the argmax (lowest index on ties).
inline std::vector<PseudoLabel> select_confident(const std::vector<nn::Prediction>& predictions, double threshold,
                                                 int round = 1, const PatchSet* pool = nullptr) {
    std::vector<PseudoLabel> out;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& p = predictions[i];
        if (p.distribution.empty()) throw InputError("prediction without a distribution");
        const int cls = nn::argmax(p.distribution);
        const double conf = p.distribution[static_cast<std::size_t>(cls)];
        if (!(conf > threshold)) continue;
        out.push_back({i, pool ? (*pool)[i].id : std::string{}, cls, conf, round});
    }
    return out;
}

// What the engine needs from a model family.
template <class L>
concept Learner = requires(L& learner, const L& cl, const PatchSet& set, int round) {
    { learner.fit(set, round) };
    { cl.predict(set) } -> std::same_as<std::vector<nn::Prediction>>;
    { cl.evaluate(set) } -> std::same_as<nn::Evaluation>;
    { cl.classes() } -> std::convertible_to<int>;
};

struct RoundReport {
    int round = 0;
    std::size_t train_size_before = 0;
    std::size_t train_size_after = 0;
    std::vector<int> additions;  // per class
    std::size_t pool_remaining = 0;
    std::optional<double> test_accuracy;
    std::optional<metrics::EvaluationReport> test_report;
    std::optional<double> pseudo_precision;  // only when the pool has hidden truth
    double mean_confidence = 0;

    int total_additions() const {
        int s = 0;
        for (int a : additions) s += a;
        return s;
    }
};

struct EngineResult {
    std::vector<RoundReport> rounds;
    PatchSet labeled{Split::train};  // human + absorbed pseudo-labels
    PatchSet pool{Split::pool};      // still unlabeled
    std::vector<PseudoLabel> absorbed;
    bool final_refit = false;  // model retrained after the last absorption
    std::optional<metrics::EvaluationReport> final_report;
};

namespace detail {

template <Learner L>
std::optional<metrics::EvaluationReport> evaluate_on(const L& learner, const PatchSet& test) {
    if (test.empty()) return std::nullopt;
    const auto ev = learner.evaluate(test);
    return metrics::report(metrics::confusion(ev.truths, ev.predictions, learner.classes()), ev.mean_loss);
}

}  // namespace detail

/// Runs up to cfg.max_rounds rounds (fewer when a round absorbs nothing and
/// stop_when_no_additions is set). When the last round absorbed patches the
/// learner is fitted once more on the final labeled set, so the learner
/// always ends trained on everything that was labeled.
template <Learner L>
EngineResult run(const PatchSet& labeled, const PatchSet& pool, const PatchSet& test, L& learner,
                 const EngineConfig& cfg) {
    cfg.validate();
    if (labeled.empty()) throw InputError("pseudo-labeling needs a non-empty labeled set");
    const int k = learner.classes();
    EngineResult res;
    for (const auto& p : labeled.patches()) {
        if (!p.label) throw InputError("labeled set entry '" + p.id + "' has no label");
        res.labeled.add(p);
    }
    res.pool = pool;
    const bool audit = EvaluationAccess::has_hidden_truth(pool);

    for (int round = 1; round <= cfg.max_rounds; ++round) {
        RoundReport rep;
        rep.round = round;
        rep.train_size_before = res.labeled.size();
        rep.additions.assign(static_cast<std::size_t>(k), 0);
        learner.fit(res.labeled, round);
        rep.test_report = detail::evaluate_on(learner, test);
        if (rep.test_report) rep.test_accuracy = rep.test_report->accuracy;

        if (!res.pool.empty()) {
            const auto selected = select_confident(learner.predict(res.pool), cfg.threshold, round, &res.pool);
            std::vector<bool> taken(res.pool.size(), false);
            std::size_t correct = 0;
            double conf_sum = 0;
            for (const auto& s : selected) {
                taken[s.pool_index] = true;
                LabeledPatch p = res.pool[s.pool_index];
                p.label = s.assigned_class;
                p.provenance = Provenance::pseudo(round);
                p.confidence = s.confidence;
                res.labeled.add(std::move(p));
                ++rep.additions[static_cast<std::size_t>(s.assigned_class)];
                conf_sum += s.confidence;
                if (audit && EvaluationAccess::hidden_truth(res.pool, s.pool_index) == s.assigned_class) ++correct;
                res.absorbed.push_back(s);
            }
            if (!selected.empty()) {
                rep.mean_confidence = conf_sum / static_cast<double>(selected.size());
                if (audit) rep.pseudo_precision = static_cast<double>(correct) / static_cast<double>(selected.size());
            }
            std::vector<std::size_t> keep;
            for (std::size_t i = 0; i < taken.size(); ++i)
                if (!taken[i]) keep.push_back(i);
            res.pool = res.pool.subset(keep);
        }
        rep.train_size_after = res.labeled.size();
        rep.pool_remaining = res.pool.size();
        const bool added = rep.total_additions() > 0;
        res.rounds.push_back(std::move(rep));
        if (!added && cfg.stop_when_no_additions) break;
    }

    if (res.rounds.back().total_additions() > 0) {
        learner.fit(res.labeled, static_cast<int>(res.rounds.size()) + 1);
        res.final_refit = true;
        res.final_report = detail::evaluate_on(learner, test);
    } else {
        res.final_report = res.rounds.back().test_report;
    }
    return res;
}

/// Supervised CNN learner. Each fit computes balanced class weights from the
/// current labeled counts (when `balance` is set) and either trains a freshly
/// initialized network or continues from the previous round's weights.
class CnnLearner {
public:
    CnnLearner(nn::NetworkSpec spec, nn::TrainConfig train, bool balance = true, Retrain retrain = Retrain::fresh,
               std::uint64_t init_seed = 0)
        : spec_(std::move(spec)), train_(std::move(train)), balance_(balance), retrain_(retrain), init_seed_(init_seed) {
        spec_.validate();
    }

    void fit(const PatchSet& labeled, int round) {
        if (retrain_ == Retrain::fresh || !params_) params_ = nn::build(spec_, derive_seed(init_seed_, 0x1417, round));
        auto cfg = train_;
        cfg.seed = derive_seed(train_.seed, 0x7e5, round);
        if (balance_) cfg.class_weights = balanced_weights(labeled.class_counts(classes())).weights;
        history_ = nn::train(spec_, *params_, labeled, cfg);
    }

    std::vector<nn::Prediction> predict(const PatchSet& set) const { return nn::predict(spec_, params(), set); }
    nn::Evaluation evaluate(const PatchSet& set) const { return nn::evaluate(spec_, params(), set); }
    int classes() const { return spec_.classes(); }

    const nn::NetworkSpec& spec() const noexcept { return spec_; }
    const nn::NetworkParams& params() const {
        if (!params_) throw InputError("learner has not been fitted");
        return *params_;
    }
    const nn::History& history() const noexcept { return history_; }

private:
    nn::NetworkSpec spec_;
    nn::TrainConfig train_;
    bool balance_;
    Retrain retrain_;
    std::uint64_t init_seed_;
    std::optional<nn::NetworkParams> params_;
    nn::History history_;
};

static_assert(Learner<CnnLearner>);

inline nlohmann::json to_json(const RoundReport& r, const std::vector<std::string>& class_names) {
    nlohmann::json j;
    j["round"] = r.round;
    j["train_size_before"] = r.train_size_before;
    j["train_size_after"] = r.train_size_after;
    nlohmann::json add = nlohmann::json::object();
    for (std::size_t c = 0; c < r.additions.size(); ++c)
        add[c < class_names.size() ? class_names[c] : class_name(static_cast<ClassId>(c))] = r.additions[c];
    j["additions"] = add;
    j["pool_remaining"] = r.pool_remaining;
    j["test_accuracy"] = r.test_accuracy ? nlohmann::json(*r.test_accuracy) : nlohmann::json(nullptr);
    j["pseudo_precision"] = r.pseudo_precision ? nlohmann::json(*r.pseudo_precision) : nlohmann::json(nullptr);
    j["mean_confidence"] = r.mean_confidence;
    if (r.test_report) j["test_report"] = metrics::to_json(*r.test_report);
    return j;
}

// round_<n>.json per round plus rounds.csv
// (round, train_size, additions_<class>..., pool_size, test_accuracy).
inline void write_reports(const std::filesystem::path& dir, const std::vector<RoundReport>& rounds,
                          const std::vector<std::string>& class_names) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    std::string csv = "round,train_size";
    for (const auto& n : class_names) csv += ",additions_" + n;
    csv += ",pool_size,test_accuracy\n";
    for (const auto& r : rounds) {
        metrics::detail::write_text(dir / ("round_" + std::to_string(r.round) + ".json"),
                                    to_json(r, class_names).dump(2) + "\n");
        csv += std::to_string(r.round) + "," + std::to_string(r.train_size_before);
        for (int a : r.additions) csv += "," + std::to_string(a);
        char acc[32] = "";
        if (r.test_accuracy) std::snprintf(acc, sizeof acc, "%.6f", *r.test_accuracy);
        csv += "," + std::to_string(r.pool_remaining) + "," + acc + "\n";
    }
    metrics::detail::write_text(dir / "rounds.csv", csv);
}

}  // namespace defectlab::pseudo
