#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "image.hpp"
#include "log.hpp"
#include "random.hpp"

namespace defectlab {

// Class indices are dense from 0. The four defect classes come first;
// few-shot episodes may add novel classes from 4 upward.
using ClassId = int;

enum class DefectClass : ClassId { Crack = 0, Pinhole = 1, Hole = 2, Spatter = 3 };

inline constexpr int kDefectClassCount = 4;
inline constexpr std::array<std::string_view, kDefectClassCount> kDefectClassNames{"crack", "pinhole", "hole",
                                                                                   "spatter"};

inline std::string class_name(ClassId c) {
    if (c >= 0 && c < kDefectClassCount) return std::string(kDefectClassNames[static_cast<std::size_t>(c)]);
    return "class" + std::to_string(c);
}

inline ClassId class_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kDefectClassNames.size(); ++i)
        if (kDefectClassNames[i] == name) return static_cast<ClassId>(i);
    throw LabelError("unknown defect class '" + std::string(name) + "'");
}

using LabelMap = std::map<std::string, ClassId, std::less<>>;

inline LabelMap default_label_map() {
    LabelMap m;
    for (std::size_t i = 0; i < kDefectClassNames.size(); ++i)
        m.emplace(std::string(kDefectClassNames[i]), static_cast<ClassId>(i));
    return m;
}

// Half-open pixel box [xmin, xmax) x [ymin, ymax).
struct BoundingBox {
    int xmin = 0, ymin = 0, xmax = 0, ymax = 0;

    int width() const noexcept { return xmax - xmin; }
    int height() const noexcept { return ymax - ymin; }
    bool empty() const noexcept { return xmax <= xmin || ymax <= ymin; }

    BoundingBox clamped(int image_width, int image_height) const noexcept {
        return {std::clamp(xmin, 0, image_width), std::clamp(ymin, 0, image_height), std::clamp(xmax, 0, image_width),
                std::clamp(ymax, 0, image_height)};
    }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Annotation {
    std::string image_id;
    BoundingBox box;
    ClassId label = 0;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

enum class Origin { human, pseudo, synthetic };

inline std::string_view to_string(Origin o) {
    switch (o) {
        case Origin::human: return "human";
        case Origin::pseudo: return "pseudo";
        case Origin::synthetic: return "synthetic";
    }
    return "human";
}

inline Origin origin_from_string(std::string_view s) {
    if (s == "human") return Origin::human;
    if (s == "pseudo") return Origin::pseudo;
    if (s == "synthetic") return Origin::synthetic;
    throw FormatError("unknown provenance '" + std::string(s) + "'");
}

struct Provenance {
    Origin origin = Origin::human;
    int round = 0;  // pseudo-labeling round, pseudo origin only

    static Provenance human() { return {Origin::human, 0}; }
    static Provenance synthetic() { return {Origin::synthetic, 0}; }
    static Provenance pseudo(int round) { return {Origin::pseudo, round}; }

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct LabeledPatch {
    std::string id;
    GrayImage patch;
    std::optional<ClassId> label;
    Provenance provenance;
    double confidence = 1.0;
};

enum class Split { train, test, pool };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::pool: return "pool";
    }
    return "train";
}

inline Split split_from_string(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    if (s == "pool" || s == "unlabeled-pool") return Split::pool;
    throw FormatError("unknown split '" + std::string(s) + "'");
}

class EvaluationAccess;

// Ordered patches belonging to one split. Pool entries carry no label; for
// synthetic data they may record a hidden ground truth that only
// EvaluationAccess can read.
class PatchSet {
public:
    PatchSet() = default;
    explicit PatchSet(Split split) : split_(split) {}

    Split split() const noexcept { return split_; }
    std::size_t size() const noexcept { return patches_.size(); }
    bool empty() const noexcept { return patches_.empty(); }
    const std::vector<LabeledPatch>& patches() const noexcept { return patches_; }
    const LabeledPatch& operator[](std::size_t i) const { return patches_[i]; }

    void add(LabeledPatch p, std::optional<ClassId> hidden_truth = std::nullopt) {
        if (split_ == Split::pool && p.label)
            throw InputError("unlabeled-pool entries must not carry a label (patch '" + p.id + "')");
        if (!p.patch.empty() && !patches_.empty() && !patches_.front().patch.empty() &&
            (p.patch.width() != patches_.front().patch.width() || p.patch.height() != patches_.front().patch.height()))
            throw InputError("patch '" + p.id + "' size differs from the rest of the set");
        patches_.push_back(std::move(p));
        hidden_truth_.push_back(hidden_truth);
    }

    // Per-class counts over labeled entries; `classes` sets the minimum length.
    std::vector<int> class_counts(int classes = 0) const {
        std::vector<int> counts(static_cast<std::size_t>(std::max(classes, 0)), 0);
        for (const auto& p : patches_) {
            if (!p.label) continue;
            if (*p.label < 0) throw LabelError("negative class index in patch '" + p.id + "'");
            if (static_cast<std::size_t>(*p.label) >= counts.size())
                counts.resize(static_cast<std::size_t>(*p.label) + 1, 0);
            ++counts[static_cast<std::size_t>(*p.label)];
        }
        return counts;
    }

    // Entries at `indices`, in that order; hidden truth travels along.
    PatchSet subset(const std::vector<std::size_t>& indices) const {
        PatchSet out(split_);
        out.patches_.reserve(indices.size());
        out.hidden_truth_.reserve(indices.size());
        for (auto i : indices) {
            out.patches_.push_back(patches_.at(i));
            out.hidden_truth_.push_back(hidden_truth_.at(i));
        }
        return out;
    }

    std::vector<ClassId> labels() const {
        std::vector<ClassId> out;
        out.reserve(patches_.size());
        for (const auto& p : patches_) {
            if (!p.label) throw InputError("patch '" + p.id + "' has no label");
            out.push_back(*p.label);
        }
        return out;
    }

private:
    friend class EvaluationAccess;
    Split split_ = Split::train;
    std::vector<LabeledPatch> patches_;
    std::vector<std::optional<ClassId>> hidden_truth_;
};

// Evaluation-only view of hidden ground truth (synthetic pools). Training
// code paths never include this accessor.
class EvaluationAccess {
public:
    static std::optional<ClassId> hidden_truth(const PatchSet& set, std::size_t i) { return set.hidden_truth_.at(i); }
    // Copy of `set` with every hidden truth passed through `f` (class
    // re-indexing for episodes).
    template <class F>
    static PatchSet map_hidden_truth(const PatchSet& set, F f) {
        PatchSet out = set;
        for (auto& t : out.hidden_truth_)
            if (t) t = f(*t);
        return out;
    }
    static bool has_hidden_truth(const PatchSet& set) {
        return !set.hidden_truth_.empty() &&
               std::all_of(set.hidden_truth_.begin(), set.hidden_truth_.end(), [](const auto& t) { return t.has_value(); });
    }
};

struct ClassWeights {
    std::vector<double> weights;

    static ClassWeights uniform(int classes) { return {std::vector<double>(static_cast<std::size_t>(classes), 1.0)}; }
    double operator[](ClassId c) const { return weights.at(static_cast<std::size_t>(c)); }
    std::size_t size() const noexcept { return weights.size(); }
};

/// weight_c = N / (K * n_c): the inverse-frequency balancing used by
/// scikit-learn's "balanced" class weights.
inline ClassWeights balanced_weights(const std::vector<int>& counts) {
    if (counts.empty()) throw DegenerateError("class weights need at least one class");
    double total = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] <= 0)
            throw DegenerateError("class " + class_name(static_cast<ClassId>(c)) + " has no samples");
        total += counts[c];
    }
    const double k = static_cast<double>(counts.size());
    ClassWeights w;
    w.weights.reserve(counts.size());
    for (int n : counts) w.weights.push_back(total / (k * n));
    return w;
}

/// Align-corners bilinear resize: output corners sample input corners
/// exactly, and equal sizes reproduce the input.
inline GrayImage resize_bilinear(const GrayImage& src, int width, int height) {
    if (width <= 0 || height <= 0) throw ParameterError("resize target must be positive");
    GrayImage out(width, height);
    const double sx = width > 1 ? static_cast<double>(src.width() - 1) / (width - 1) : 0.0;
    const double sy = height > 1 ? static_cast<double>(src.height() - 1) / (height - 1) : 0.0;
    for (int y = 0; y < height; ++y) {
        const double fy = y * sy;
        const int y0 = std::min(static_cast<int>(fy), src.height() - 1);
        const int y1 = std::min(y0 + 1, src.height() - 1);
        const double ty = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = x * sx;
            const int x0 = std::min(static_cast<int>(fx), src.width() - 1);
            const int x1 = std::min(x0 + 1, src.width() - 1);
            const double tx = fx - x0;
            const double top = src.at(x0, y0) * (1 - tx) + src.at(x1, y0) * tx;
            const double bottom = src.at(x0, y1) * (1 - tx) + src.at(x1, y1) * tx;
            out.at(x, y) = clamp_to_u8(top * (1 - ty) + bottom * ty);
        }
    }
    return out;
}

inline GrayImage crop(const GrayImage& img, const BoundingBox& box) {
    GrayImage out(box.width(), box.height());
    for (int y = 0; y < box.height(); ++y)
        for (int x = 0; x < box.width(); ++x) out.at(x, y) = img.at(box.xmin + x, box.ymin + y);
    return out;
}

// Crops every annotation (clamped to the image) and resizes it to side x side.
// Boxes that miss the image entirely are skipped with a warning.
inline std::vector<LabeledPatch> extract_patches(const GrayImage& img, const std::vector<Annotation>& anns, int side) {
    if (side < 8) throw ParameterError("patch side must be >= 8, got " + std::to_string(side));
    std::vector<LabeledPatch> out;
    out.reserve(anns.size());
    for (std::size_t i = 0; i < anns.size(); ++i) {
        const auto& a = anns[i];
        const auto box = a.box.clamped(img.width(), img.height());
        if (box.empty()) {
            log::warn("annotation " + std::to_string(i) + " of '" + a.image_id + "' lies outside the image; skipped");
            continue;
        }
        LabeledPatch p;
        p.id = a.image_id + "#" + std::to_string(i);
        p.patch = resize_bilinear(crop(img, box), side, side);
        p.label = a.label;
        p.provenance = Provenance::human();
        p.confidence = 1.0;
        out.push_back(std::move(p));
    }
    return out;
}

struct SplitFractions {
    double train = 0.9;
    double test = 0.1;
};

/// Stratified, seeded split. The train total is round(train * N); each class
/// gets floor(train * n_c) and the remainder is handed out by largest
/// fractional part (ties to the lower class index), so every class stays
/// within one sample of its exact proportion.
inline std::pair<PatchSet, PatchSet> split(const PatchSet& patches, SplitFractions fractions, std::uint64_t seed) {
    if (!(fractions.train > 0 && fractions.train < 1) || !(fractions.test > 0 && fractions.test < 1))
        throw ParameterError("split fractions must lie in (0, 1)");
    if (std::abs(fractions.train + fractions.test - 1.0) > 1e-9) throw ParameterError("split fractions must sum to 1");

    const auto counts = patches.class_counts();
    std::vector<std::vector<std::size_t>> members(counts.size());
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const auto& l = patches[i].label;
        if (!l) throw InputError("cannot split unlabeled patch '" + patches[i].id + "'");
        members[static_cast<std::size_t>(*l)].push_back(i);
    }

    const auto total = static_cast<double>(patches.size());
    const auto train_total = static_cast<std::size_t>(std::llround(fractions.train * total));
    std::vector<std::size_t> take(counts.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        const double exact = fractions.train * counts[c];
        take[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += take[c];
        remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < train_total && i < remainders.size(); ++i) {
        const auto c = remainders[i].second;
        if (take[c] < static_cast<std::size_t>(counts[c])) {
            ++take[c];
            ++assigned;
        }
    }

    Rng rng(derive_seed(seed, 0x5b1170));
    std::vector<bool> in_train(patches.size(), false);
    for (std::size_t c = 0; c < members.size(); ++c) {
        auto m = members[c];
        rng.shuffle(m);
        for (std::size_t i = 0; i < take[c]; ++i) in_train[m[i]] = true;
    }
    PatchSet train(Split::train), test(Split::test);
    for (std::size_t i = 0; i < patches.size(); ++i) (in_train[i] ? train : test).add(patches[i]);
    return {std::move(train), std::move(test)};
}

}  // namespace defectlab
