#pragma once

// Few-shot transfer on top of a pretrained CNN: L2-normalized embeddings
// from the network's embedding layer, a cosine classifier whose class
// vectors are imprinted from mean support embeddings, fine-tuning with
// configurable freezing, and the combined imprint -> pseudo-label ->
// fine-tune pipeline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "optim.hpp"
#include "pseudolabel.hpp"
#include "random.hpp"
#include "train.hpp"
#include "weights_io.hpp"

namespace defectlab::fewshot {

inline constexpr double kDegenerateNorm = 1e-12;
inline constexpr double kDegenerateMean = 1e-9;

struct Embedding {
    std::vector<double> values;
    bool normalized = false;

    std::size_t dim() const noexcept { return values.size(); }
};

inline double norm2(std::span<const double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline Embedding normalized(std::vector<double> v) {
    const double n = norm2(v);
    if (!(n >= kDegenerateNorm)) throw DegenerateError("embedding has (near) zero norm");
    for (auto& x : v) x /= n;
    return {std::move(v), true};
}

/// Embedding-layer activations of a batch of images, each L2-normalized.
inline std::vector<Embedding> extract_embeddings(const nn::NetworkSpec& spec, const nn::NetworkParams& params,
                                                 std::span<const GrayImage* const> images) {
    const int layer = spec.embedding_layer;
    if (layer < 0) throw SpecError("network declares no embedding layer");
    const auto dim = static_cast<std::size_t>(spec.embedding_dim());
    std::vector<Embedding> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += nn::kInferenceChunk) {
        const auto end = std::min(images.size(), start + nn::kInferenceChunk);
        const auto trace =
            nn::forward_trace(spec, params, nn::images_to_batch(spec, images.subspan(start, end - start)), layer);
        const auto& act = trace.activations.back();
        for (std::size_t s = 0; s < end - start; ++s)
            out.push_back(normalized(std::vector<double>(act.data() + s * dim, act.data() + (s + 1) * dim)));
    }
    return out;
}

inline Embedding extract_embedding(const nn::NetworkSpec& spec, const nn::NetworkParams& params, const GrayImage& patch) {
    const GrayImage* p = &patch;
    return std::move(extract_embeddings(spec, params, std::span<const GrayImage* const>(&p, 1)).front());
}

inline std::vector<Embedding> extract_embeddings(const nn::NetworkSpec& spec, const nn::NetworkParams& params,
                                                 const PatchSet& set) {
    std::vector<const GrayImage*> imgs;
    for (const auto& p : set.patches()) imgs.push_back(&p.patch);
    return extract_embeddings(spec, params, imgs);
}

// Cosine classifier: logits_c = scale * <w_c, e> with unit-norm rows w_c.
struct ImprintedHead {
    std::vector<ClassId> classes;  // class id of each row
    std::vector<double> weights;   // classes.size() x dim, row-major
    std::size_t dim = 0;
    double scale = 10.0;

    std::size_t size() const noexcept { return classes.size(); }
    std::span<double> row(std::size_t c) { return {weights.data() + c * dim, dim}; }
    std::span<const double> row(std::size_t c) const { return {weights.data() + c * dim, dim}; }

    std::size_t position(ClassId c) const {
        const auto it = std::find(classes.begin(), classes.end(), c);
        if (it == classes.end()) throw LabelError("class " + class_name(c) + " is not part of the imprinted head");
        return static_cast<std::size_t>(it - classes.begin());
    }

    void renormalize() {
        for (std::size_t c = 0; c < size(); ++c) {
            auto r = row(c);
            const double n = norm2(r);
            if (!(n >= kDegenerateMean)) throw DegenerateError("head row for class " + class_name(classes[c]) + " collapsed");
            for (auto& v : r) v /= n;
        }
    }

    friend bool operator==(const ImprintedHead&, const ImprintedHead&) = default;
};

/// w_c = normalize(mean of the class's unit embeddings).
inline ImprintedHead imprint(const std::map<ClassId, std::vector<Embedding>>& by_class, double scale = 10.0) {
    if (by_class.empty()) throw InputError("imprinting needs at least one class");
    if (!(scale > 0)) throw ParameterError("head scale must be positive");
    ImprintedHead head;
    head.scale = scale;
    for (const auto& [cls, embs] : by_class) {
        if (embs.empty()) throw InputError("class " + class_name(cls) + " has no embeddings to imprint");
        if (head.dim == 0) head.dim = embs.front().dim();
        std::vector<double> mean(head.dim, 0.0);
        for (const auto& e : embs) {
            if (e.dim() != head.dim) throw InputError("embedding dimensions differ within the support set");
            if (std::abs(norm2(e.values) - 1.0) > 1e-6)
                throw InputError("imprinting expects unit-norm embeddings (class " + class_name(cls) + ")");
            for (std::size_t i = 0; i < head.dim; ++i) mean[i] += e.values[i];
        }
        for (auto& v : mean) v /= static_cast<double>(embs.size());
        const double n = norm2(mean);
        if (!(n >= kDegenerateMean))
            throw DegenerateError("mean embedding of class " + class_name(cls) + " vanishes (antipodal support)");
        for (auto& v : mean) head.weights.push_back(v / n);
        head.classes.push_back(cls);
    }
    return head;
}

/// Softmax over scale * cosine; distribution index i refers to
/// head.classes[i], and Prediction::label holds that class id.
inline nn::Prediction head_predict(const ImprintedHead& head, const Embedding& e) {
    if (e.dim() != head.dim)
        throw InputError("embedding dimension " + std::to_string(e.dim()) + " does not match head " +
                         std::to_string(head.dim));
    std::vector<double> z(head.size());
    for (std::size_t c = 0; c < head.size(); ++c) z[c] = head.scale * dot(head.row(c), e.values);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0;
    for (auto& v : z) sum += (v = std::exp(v - m));
    for (auto& v : z) v /= sum;
    nn::Prediction p;
    const int pos = nn::argmax(z);
    p.label = head.classes[static_cast<std::size_t>(pos)];
    p.confidence = z[static_cast<std::size_t>(pos)];
    p.distribution = std::move(z);
    return p;
}

enum class Freeze { all_but_head, last_block_and_head, none };

inline std::string to_string(Freeze f) {
    switch (f) {
        case Freeze::all_but_head: return "all-but-head";
        case Freeze::last_block_and_head: return "last-block+head";
        case Freeze::none: return "none";
    }
    return "none";
}

inline Freeze freeze_from_string(const std::string& s) {
    if (s == "all-but-head") return Freeze::all_but_head;
    if (s == "last-block+head") return Freeze::last_block_and_head;
    if (s == "none") return Freeze::none;
    throw ParameterError("unknown freeze mode '" + s + "' (expected all-but-head|last-block+head|none)");
}

enum class Mode { paper, split };

inline std::string to_string(Mode m) { return m == Mode::paper ? "paper" : "split"; }

inline Mode mode_from_string(const std::string& s) {
    if (s == "paper") return Mode::paper;
    if (s == "split") return Mode::split;
    throw ParameterError("unknown transmatch mode '" + s + "' (expected paper|split)");
}

struct TransMatchConfig {
    Mode mode = Mode::paper;
    Freeze freeze = Freeze::last_block_and_head;
    pseudo::EngineConfig engine;
    nn::TrainConfig fine_tune;
    double scale = 10.0;

    void validate() const {
        engine.validate();
        fine_tune.validate();
        if (!(scale > 0)) throw ParameterError("head scale must be positive");
    }
};

// Lowest network layer updated by fine-tuning; layers() when the whole
// network is frozen. The "last block" is the embedding dense layer, i.e.
// everything after the final flatten.
inline int lowest_trainable_layer(const nn::NetworkSpec& spec, Freeze f) {
    switch (f) {
        case Freeze::all_but_head: return static_cast<int>(spec.layers.size());
        case Freeze::last_block_and_head: return spec.embedding_layer;
        case Freeze::none: return 0;
    }
    return 0;
}

struct FineTuneResult {
    nn::History history;
};

namespace detail {

// Gradient of the class-weighted cosine-softmax loss for one batch of raw
// embeddings (N x D). Adds head gradients into `dhead`, returns dL/d(raw
// embedding) and the batch loss; `correct` counts argmax hits.
inline double cosine_head_grad(const ImprintedHead& head, const Tensor& raw, const std::vector<std::size_t>& targets,
                               const std::vector<double>& class_weights, std::vector<double>& dhead, Tensor* draw,
                               std::size_t& correct) {
    const int n = raw.dim(0);
    const std::size_t d = head.dim, k = head.size();
    double loss = 0;
    std::vector<double> e(d), de(d), z(k);
    for (int s = 0; s < n; ++s) {
        const double* r = raw.data() + static_cast<std::size_t>(s) * d;
        const double nrm = norm2({r, d});
        if (!(nrm >= kDegenerateNorm)) throw DegenerateError("embedding has (near) zero norm during fine-tuning");
        for (std::size_t i = 0; i < d; ++i) e[i] = r[i] / nrm;
        for (std::size_t c = 0; c < k; ++c) z[c] = head.scale * dot(head.row(c), e);
        const double m = *std::max_element(z.begin(), z.end());
        double sum = 0;
        for (auto& v : z) sum += (v = std::exp(v - m));
        for (auto& v : z) v /= sum;
        const std::size_t y = targets[static_cast<std::size_t>(s)];
        if (static_cast<std::size_t>(nn::argmax(z)) == y) ++correct;
        const double w = class_weights.empty() ? 1.0 : class_weights[y];
        loss += w * -std::log(std::max(z[y], nn::kProbabilityFloor));
        std::fill(de.begin(), de.end(), 0.0);
        for (std::size_t c = 0; c < k; ++c) {
            const double dz = w * (z[c] - (c == y ? 1.0 : 0.0)) / n;
            const auto wc = head.row(c);
            double* dw = dhead.data() + c * d;
            for (std::size_t i = 0; i < d; ++i) {
                dw[i] += head.scale * dz * e[i];
                de[i] += head.scale * dz * wc[i];
            }
        }
        if (draw) {
            const double proj = dot(e, de);
            double* out = draw->data() + static_cast<std::size_t>(s) * d;
            for (std::size_t i = 0; i < d; ++i) out[i] = (de[i] - e[i] * proj) / nrm;
        }
    }
    return loss / n;
}

}  // namespace detail

/// Fine-tunes the head (and the unfrozen part of the network) on labeled
/// patches whose labels are head class ids. Head rows are re-normalized
/// after every epoch.
inline FineTuneResult fine_tune(const nn::NetworkSpec& spec, nn::NetworkParams& params, ImprintedHead& head,
                                const PatchSet& data, const nn::TrainConfig& cfg, Freeze freeze) {
    cfg.validate();
    nn::check_params(spec, params);
    FineTuneResult res;
    if (cfg.epochs == 0) return res;
    if (data.empty()) throw InputError("fine-tuning data is empty");
    if (static_cast<std::size_t>(spec.embedding_dim()) != head.dim)
        throw InputError("head dimension does not match the network embedding");
    std::vector<std::size_t> targets;
    for (auto y : data.labels()) targets.push_back(head.position(y));
    if (!cfg.class_weights.empty() && cfg.class_weights.size() != head.size())
        throw InputError("fine-tune class weights must have one entry per head class");

    const int emb_layer = spec.embedding_layer;
    const int lowest = lowest_trainable_layer(spec, freeze);
    const bool network_frozen = lowest > emb_layer;

    // Frozen extractor: embeddings never change, compute them once.
    std::optional<Tensor> cached;
    if (network_frozen) {
        std::vector<std::size_t> all(data.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        cached = Tensor({static_cast<int>(data.size()), static_cast<int>(head.dim)});
        for (std::size_t start = 0; start < all.size(); start += nn::kInferenceChunk) {
            const auto end = std::min(all.size(), start + nn::kInferenceChunk);
            const auto t = nn::forward_trace(spec, params,
                                             nn::patches_to_batch(spec, data, {all.data() + start, end - start}), emb_layer);
            std::copy(t.activations.back().values().begin(), t.activations.back().values().end(),
                      cached->data() + start * head.dim);
        }
    }

    nn::Optimizer opt(cfg.optimizer);
    Rng rng(derive_seed(cfg.seed, 0xf17e));
    std::vector<std::size_t> order(data.size());
    std::vector<double> dhead(head.weights.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (cfg.shuffle) rng.shuffle(order);
        double loss_sum = 0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            std::vector<std::size_t> y;
            for (auto i : idx) y.push_back(targets[i]);
            std::fill(dhead.begin(), dhead.end(), 0.0);
            std::vector<nn::ParamSlot> slots;
            nn::NetworkParams grads;
            if (network_frozen) {
                Tensor raw({static_cast<int>(idx.size()), static_cast<int>(head.dim)});
                for (std::size_t s = 0; s < idx.size(); ++s)
                    std::copy(cached->data() + idx[s] * head.dim, cached->data() + (idx[s] + 1) * head.dim,
                              raw.data() + s * head.dim);
                loss_sum += detail::cosine_head_grad(head, raw, y, cfg.class_weights, dhead, nullptr, correct) *
                            static_cast<double>(idx.size());
            } else {
                auto trace = nn::forward_trace(spec, params, nn::patches_to_batch(spec, data, idx), emb_layer);
                Tensor draw(trace.activations.back().shape());
                loss_sum += detail::cosine_head_grad(head, trace.activations.back(), y, cfg.class_weights, dhead, &draw,
                                                     correct) *
                            static_cast<double>(idx.size());
                grads = nn::backward(spec, params, std::move(trace), emb_layer, std::move(draw), lowest);
                slots = nn::network_slots(params, grads, lowest);
            }
            slots.push_back({head.weights, dhead});
            opt.step(slots);
        }
        head.renormalize();
        res.history.push_back({loss_sum / static_cast<double>(data.size()),
                               static_cast<double>(correct) / static_cast<double>(data.size())});
    }
    return res;
}

/// Learner for the pseudo-label engine. It works in head-position space:
/// labels 0..K-1 stand for `classes[0..K-1]`. fit() re-imprints the head from
/// all currently labeled patches with the fixed network; predictions come
/// from the cosine head.
class ImprintLearner {
public:
    ImprintLearner(const nn::NetworkSpec& spec, const nn::NetworkParams& params, std::vector<ClassId> classes,
                   double scale)
        : spec_(&spec), params_(&params), classes_(std::move(classes)), scale_(scale) {}

    void fit(const PatchSet& labeled, int /*round*/) {
        const auto embs = extract_embeddings(*spec_, *params_, labeled);
        std::map<ClassId, std::vector<Embedding>> by_position;
        for (std::size_t c = 0; c < classes_.size(); ++c) by_position[static_cast<ClassId>(c)];
        for (std::size_t i = 0; i < labeled.size(); ++i) {
            const auto c = *labeled[i].label;
            if (c < 0 || c >= classes()) throw LabelError("labeled patch '" + labeled[i].id + "' is outside the head");
            by_position[c].push_back(embs[i]);
        }
        auto head = imprint(by_position, scale_);
        head.classes = classes_;
        head_ = std::move(head);
    }

    std::vector<nn::Prediction> predict(const PatchSet& set) const {
        std::vector<nn::Prediction> out;
        for (const auto& e : extract_embeddings(*spec_, *params_, set)) {
            auto p = head_predict(head(), e);
            p.label = static_cast<ClassId>(nn::argmax(p.distribution));
            out.push_back(std::move(p));
        }
        return out;
    }

    nn::Evaluation evaluate(const PatchSet& set) const {
        return evaluate_head(*spec_, *params_, head(), set, /*labels_are_positions=*/true);
    }

    int classes() const { return static_cast<int>(classes_.size()); }

    const ImprintedHead& head() const {
        if (!head_) throw InputError("head has not been imprinted");
        return *head_;
    }

    // Truths and predictions in head positions. Set labels are class ids
    // unless `labels_are_positions`.
    static nn::Evaluation evaluate_head(const nn::NetworkSpec& spec, const nn::NetworkParams& params,
                                        const ImprintedHead& head, const PatchSet& set,
                                        bool labels_are_positions = false) {
        nn::Evaluation ev;
        if (set.empty()) return ev;
        const auto embs = extract_embeddings(spec, params, set);
        double loss = 0;
        for (std::size_t i = 0; i < set.size(); ++i) {
            const auto p = head_predict(head, embs[i]);
            const auto label = *set[i].label;
            const auto truth = labels_are_positions ? static_cast<std::size_t>(label) : head.position(label);
            if (truth >= head.size()) throw LabelError("label outside the head");
            ev.truths.push_back(static_cast<int>(truth));
            ev.predictions.push_back(nn::argmax(p.distribution));
            loss += -std::log(std::max(p.distribution[truth], nn::kProbabilityFloor));
        }
        ev.mean_loss = loss / static_cast<double>(set.size());
        return ev;
    }

private:
    const nn::NetworkSpec* spec_;
    const nn::NetworkParams* params_;
    std::vector<ClassId> classes_;
    double scale_;
    std::optional<ImprintedHead> head_;
};

static_assert(pseudo::Learner<ImprintLearner>);

struct FewShotEpisode {
    Mode mode = Mode::paper;
    std::vector<ClassId> base_classes;
    std::vector<ClassId> novel_classes;  // head classes; all classes in paper mode
    int shots = 5;
    PatchSet support{Split::train};  // labeled shots (class ids)
    PatchSet pool{Split::pool};      // unlabeled
    PatchSet query{Split::test};     // labeled evaluation set

    void validate() const {
        if (novel_classes.empty()) throw InputError("episode has no novel classes");
        if (mode == Mode::split)
            for (auto c : base_classes)
                if (std::find(novel_classes.begin(), novel_classes.end(), c) != novel_classes.end())
                    throw InputError("class " + class_name(c) + " is both base and novel");
        const auto counts = support.class_counts();
        for (auto c : novel_classes) {
            const int n = static_cast<std::size_t>(c) < counts.size() ? counts[static_cast<std::size_t>(c)] : 0;
            if (n != shots)
                throw InputError("support has " + std::to_string(n) + " shots for class " + class_name(c) + ", expected " +
                                 std::to_string(shots));
        }
        for (const auto& p : support.patches())
            if (std::find(novel_classes.begin(), novel_classes.end(), *p.label) == novel_classes.end())
                throw InputError("support patch '" + p.id + "' is outside the novel classes");
    }
};

/// Builds an episode from labeled train/test sets. Support takes `shots`
/// seeded picks per novel class from `train`; the remaining train patches of
/// those classes become the unlabeled pool (truth kept hidden, for auditing
/// only) unless `pool_from_train` is false; the query set is every `test`
/// patch of a novel class.
inline FewShotEpisode make_episode(Mode mode, std::vector<ClassId> base, std::vector<ClassId> novel, int shots,
                                   const PatchSet& train, const PatchSet& test, std::uint64_t seed,
                                   bool pool_from_train = true) {
    if (shots < 1) throw ParameterError("shots must be >= 1");
    FewShotEpisode ep;
    ep.mode = mode;
    ep.base_classes = std::move(base);
    ep.novel_classes = std::move(novel);
    ep.shots = shots;
    Rng rng(derive_seed(seed, 0xe915));
    for (auto c : ep.novel_classes) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < train.size(); ++i)
            if (train[i].label == c) members.push_back(i);
        if (static_cast<int>(members.size()) < shots)
            throw InputError("class " + class_name(c) + " has only " + std::to_string(members.size()) + " patches for " +
                             std::to_string(shots) + " shots");
        rng.shuffle(members);
        for (std::size_t j = 0; j < members.size(); ++j) {
            const auto& p = train[members[j]];
            if (static_cast<int>(j) < shots) {
                ep.support.add(p);
            } else if (pool_from_train) {
                LabeledPatch u = p;
                u.label.reset();
                u.confidence = 1.0;
                ep.pool.add(std::move(u), c);
            }
        }
    }
    for (const auto& p : test.patches())
        if (p.label && std::find(ep.novel_classes.begin(), ep.novel_classes.end(), *p.label) != ep.novel_classes.end())
            ep.query.add(p);
    ep.validate();
    return ep;
}

// Keeps the patches of `classes`, relabeled to their position in `classes`.
inline PatchSet remap_classes(const PatchSet& set, const std::vector<ClassId>& classes) {
    PatchSet out(set.split());
    for (const auto& p : set.patches()) {
        if (!p.label) continue;
        const auto it = std::find(classes.begin(), classes.end(), *p.label);
        if (it == classes.end()) continue;
        LabeledPatch q = p;
        q.label = static_cast<ClassId>(it - classes.begin());
        out.add(std::move(q));
    }
    return out;
}

struct TransMatchResult {
    nn::NetworkParams params;
    ImprintedHead head;
    pseudo::EngineResult engine;
    nn::History fine_tune_history;
    metrics::ConfusionMatrix confusion;
    std::optional<metrics::EvaluationReport> final_report;  // on the query set
};

inline std::vector<std::string> head_class_names(const ImprintedHead& head) {
    std::vector<std::string> names;
    for (auto c : head.classes) names.push_back(class_name(c));
    return names;
}

inline std::pair<metrics::ConfusionMatrix, std::optional<metrics::EvaluationReport>> evaluate_query(
    const nn::NetworkSpec& spec, const nn::NetworkParams& params, const ImprintedHead& head, const PatchSet& query) {
    metrics::ConfusionMatrix m(static_cast<int>(head.size()));
    if (query.empty()) return {m, std::nullopt};
    const auto ev = ImprintLearner::evaluate_head(spec, params, head, query);
    m = metrics::confusion(ev.truths, ev.predictions, static_cast<int>(head.size()));
    return {m, metrics::report(m, ev.mean_loss, head_class_names(head))};
}

/// Imprint the head from the support shots, run the pseudo-label engine over
/// the pool with head confidences (re-imprinting each round), then fine-tune
/// on support plus absorbed patches and evaluate on the query set.
inline TransMatchResult transmatch_run(const FewShotEpisode& episode, const nn::NetworkSpec& spec,
                                       const nn::NetworkParams& base_params, const TransMatchConfig& cfg) {
    cfg.validate();
    episode.validate();
    const auto& classes = episode.novel_classes;
    auto to_position = [&](ClassId c) {
        return static_cast<ClassId>(std::find(classes.begin(), classes.end(), c) - classes.begin());
    };
    TransMatchResult res;
    res.params = base_params;
    {
        ImprintLearner learner(spec, res.params, classes, cfg.scale);
        res.engine = pseudo::run(remap_classes(episode.support, classes),
                                 EvaluationAccess::map_hidden_truth(episode.pool, to_position),
                                 remap_classes(episode.query, classes), learner, cfg.engine);
        res.head = learner.head();
    }
    PatchSet data(Split::train);
    for (const auto& p : res.engine.labeled.patches()) {
        LabeledPatch q = p;
        q.label = classes.at(static_cast<std::size_t>(*q.label));
        data.add(std::move(q));
    }
    res.engine.labeled = data;
    res.fine_tune_history = fine_tune(spec, res.params, res.head, data, cfg.fine_tune, cfg.freeze).history;
    std::tie(res.confusion, res.final_report) = evaluate_query(spec, res.params, res.head, episode.query);
    return res;
}

inline nn::ParamGroup head_to_group(const ImprintedHead& head) {
    nn::ParamGroup g;
    g.name = "imprinted_head";
    g.meta = {{"scale", head.scale}, {"classes", head.classes}};
    g.tensors.emplace_back(Shape{static_cast<int>(head.size()), static_cast<int>(head.dim)}, head.weights);
    return g;
}

inline ImprintedHead head_from_group(const nn::ParamGroup& g) {
    try {
        ImprintedHead h;
        h.scale = g.meta.at("scale").get<double>();
        h.classes = g.meta.at("classes").get<std::vector<ClassId>>();
        if (g.tensors.size() != 1 || g.tensors[0].rank() != 2 ||
            static_cast<std::size_t>(g.tensors[0].dim(0)) != h.classes.size())
            throw FormatError("imprinted head tensor does not match its class list");
        h.dim = static_cast<std::size_t>(g.tensors[0].dim(1));
        h.weights.assign(g.tensors[0].values().begin(), g.tensors[0].values().end());
        return h;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed imprinted head metadata: ") + e.what());
    }
}

}  // namespace defectlab::fewshot
