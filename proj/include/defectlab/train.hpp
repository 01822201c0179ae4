#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "dataset.hpp"
#include "error.hpp"
#include "network.hpp"
#include "optim.hpp"
#include "random.hpp"

namespace defectlab::nn {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 32;
    OptimizerConfig optimizer = OptimizerConfig::adam();
    std::vector<double> class_weights;  // empty: uniform
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate() const {
        if (epochs < 0) throw ParameterError("epochs must be non-negative");
        if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
        optimizer.validate();
        for (double w : class_weights)
            if (!(w > 0)) throw ParameterError("class weights must be positive");
    }
};

struct EpochStats {
    double loss = 0;
    double accuracy = 0;
    friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

using History = std::vector<EpochStats>;

// Intensities are fed to the network scaled to [0, 1].
inline constexpr double kInputScale = 1.0 / 255.0;

inline Tensor images_to_batch(const NetworkSpec& spec, std::span<const GrayImage* const> images) {
    const int h = spec.input_shape[0], w = spec.input_shape[1], c = spec.input_shape[2];
    if (c != 1) throw InputError("gray patches need a single-channel network input");
    if (images.empty()) throw InputError("empty batch");
    Tensor batch({static_cast<int>(images.size()), h, w, c});
    std::size_t o = 0;
    for (const auto* img : images) {
        if (img->width() != w || img->height() != h)
            throw InputError("patch " + std::to_string(img->width()) + "x" + std::to_string(img->height()) +
                             " does not match network input " + std::to_string(w) + "x" + std::to_string(h));
        for (auto v : img->data()) batch[o++] = v * kInputScale;
    }
    return batch;
}

inline Tensor patches_to_batch(const NetworkSpec& spec, const PatchSet& set, std::span<const std::size_t> indices) {
    std::vector<const GrayImage*> imgs;
    imgs.reserve(indices.size());
    for (auto i : indices) imgs.push_back(&set[i].patch);
    return images_to_batch(spec, imgs);
}

// Lowest index wins ties.
inline int argmax(std::span<const double> v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Mini-batch training. The shuffle order of every epoch comes from
/// cfg.seed, so equal inputs give bit-identical parameters and history.
/// Layers below `lowest_trainable_layer` are left untouched.
inline History train(const NetworkSpec& spec, NetworkParams& params, const PatchSet& set, const TrainConfig& cfg,
                     int lowest_trainable_layer = 0) {
    cfg.validate();
    check_params(spec, params);
    if (cfg.epochs == 0) return {};
    if (set.empty()) throw InputError("training set is empty");
    const auto labels = set.labels();
    const int k = spec.classes();
    for (auto y : labels)
        if (y < 0 || y >= k) throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");

    Optimizer opt(cfg.optimizer);
    Rng rng(derive_seed(cfg.seed, 0x7a1));
    std::vector<std::size_t> order(set.size());
    History history;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (cfg.shuffle) rng.shuffle(order);
        double loss_sum = 0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            std::vector<int> y;
            y.reserve(idx.size());
            for (auto i : idx) y.push_back(labels[i]);
            auto [probs, trace] = forward(spec, params, patches_to_batch(spec, set, idx));
            for (std::size_t s = 0; s < idx.size(); ++s)
                if (argmax({probs.data() + s * k, static_cast<std::size_t>(k)}) == y[s]) ++correct;
            auto lg = loss_and_grad(spec, params, std::move(trace), probs, y, cfg.class_weights, lowest_trainable_layer);
            loss_sum += lg.loss * static_cast<double>(idx.size());
            opt.step(network_slots(params, lg.grads, lowest_trainable_layer));
        }
        history.push_back({loss_sum / static_cast<double>(set.size()),
                           static_cast<double>(correct) / static_cast<double>(set.size())});
    }
    return history;
}

struct Prediction {
    ClassId label = 0;
    double confidence = 0;
    std::vector<double> distribution;
};

inline constexpr std::size_t kInferenceChunk = 64;

inline std::vector<Prediction> predict_images(const NetworkSpec& spec, const NetworkParams& params,
                                              std::span<const GrayImage* const> images) {
    std::vector<Prediction> out;
    out.reserve(images.size());
    const int k = spec.classes();
    for (std::size_t start = 0; start < images.size(); start += kInferenceChunk) {
        const auto end = std::min(images.size(), start + kInferenceChunk);
        const auto probs = forward(spec, params, images_to_batch(spec, images.subspan(start, end - start))).probs;
        for (std::size_t s = 0; s < end - start; ++s) {
            const double* p = probs.data() + s * static_cast<std::size_t>(k);
            Prediction pr;
            pr.distribution.assign(p, p + k);
            pr.label = argmax(pr.distribution);
            pr.confidence = pr.distribution[static_cast<std::size_t>(pr.label)];
            out.push_back(std::move(pr));
        }
    }
    return out;
}

inline std::vector<Prediction> predict(const NetworkSpec& spec, const NetworkParams& params, const PatchSet& set) {
    std::vector<const GrayImage*> imgs;
    imgs.reserve(set.size());
    for (const auto& p : set.patches()) imgs.push_back(&p.patch);
    return predict_images(spec, params, imgs);
}

struct Evaluation {
    std::vector<int> truths;
    std::vector<int> predictions;
    double mean_loss = 0;  // unweighted cross-entropy
};

inline Evaluation evaluate(const NetworkSpec& spec, const NetworkParams& params, const PatchSet& set) {
    Evaluation e;
    e.truths = set.labels();
    if (set.empty()) return e;
    const auto preds = predict(spec, params, set);
    double loss = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        e.predictions.push_back(preds[i].label);
        const auto y = static_cast<std::size_t>(e.truths[i]);
        if (y >= preds[i].distribution.size()) throw LabelError("test label outside the network's classes");
        loss += -std::log(std::max(preds[i].distribution[y], kProbabilityFloor));
    }
    e.mean_loss = loss / static_cast<double>(preds.size());
    return e;
}

}  // namespace defectlab::nn
