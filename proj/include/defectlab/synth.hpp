#pragma once

// Procedural defect imagery for desk-scale experiments. The four
// morphologies are caricatures: a dark random-walk crack, a small dark
// disk (pinhole), a large dark disk (hole) and bright elliptical blobs along
// a streak (spatter), each on a Gaussian-noise background. Pores with a
// radius of 5 px or less are pinholes, larger ones holes.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "error.hpp"
#include "image.hpp"
#include "random.hpp"

namespace defectlab::synth {

struct SynthConfig {
    std::uint64_t seed = 42;
    int image_side = 64;
    double noise_sigma = 8.0;
    int pinhole_radius_max = 5;
    int hole_radius_min = 6;
    int crack_steps = 40;
    int spatter_blobs_min = 5;
    int spatter_blobs_max = 15;
    int train_per_class = 200;
    int test_per_class = 50;
    int pool_count = 800;

    void validate() const {
        if (image_side < 16) throw ParameterError("synth image_side must be >= 16");
        if (noise_sigma < 0) throw ParameterError("synth noise_sigma must be non-negative");
        if (pinhole_radius_max < 1) throw ParameterError("pinhole_radius_max must be >= 1");
        if (pinhole_radius_max >= hole_radius_min)
            throw ParameterError("pinhole_radius_max must be smaller than hole_radius_min");
        if (hole_radius_min > image_side / 3) throw ParameterError("hole_radius_min exceeds image_side / 3");
        if (crack_steps < 8) throw ParameterError("crack_steps must be >= 8");
        if (spatter_blobs_min < 1 || spatter_blobs_min > spatter_blobs_max)
            throw ParameterError("spatter blob range must satisfy 1 <= min <= max");
        if (train_per_class < 0 || test_per_class < 0 || pool_count < 0)
            throw ParameterError("synth counts must be non-negative");
    }
};

struct Rendering {
    GrayImage image;
    BinaryImage mask;  // defect pixels
    double size = 0;   // disk radius, blob count or walk length depending on class
};

namespace detail {

inline constexpr double kDark = 40.0;
inline constexpr double kBright = 235.0;

inline std::vector<double> background(Rng& rng, int side) {
    const double level = rng.uniform(130.0, 170.0);
    return std::vector<double>(static_cast<std::size_t>(side) * side, level);
}

inline GrayImage finish(std::vector<double>& canvas, int side, double noise_sigma, Rng& rng) {
    GrayImage img(side, side);
    for (std::size_t i = 0; i < canvas.size(); ++i) img.data()[i] = clamp_to_u8(canvas[i] + noise_sigma * rng.normal());
    return img;
}

inline void paint(std::vector<double>& canvas, BinaryImage& mask, int side, int x, int y, double value) {
    if (x < 0 || y < 0 || x >= side || y >= side) return;
    canvas[static_cast<std::size_t>(y) * side + x] = value;
    mask.set(x, y, true);
}

inline Rendering crack(const SynthConfig& cfg, Rng& rng) {
    const int side = cfg.image_side;
    auto canvas = background(rng, side);
    BinaryImage mask(side, side);
    const int width = static_cast<int>(rng.uniform_int(1, 2));
    const double margin = 3.0;
    double x = rng.uniform(side * 0.3, side * 0.7);
    double y = rng.uniform(side * 0.3, side * 0.7);
    double heading = rng.uniform(0.0, 2 * std::numbers::pi);
    // Start half a walk behind the center so the crack is roughly centered.
    x -= std::cos(heading) * cfg.crack_steps / 2.0;
    y -= std::sin(heading) * cfg.crack_steps / 2.0;
    x = std::clamp(x, margin, side - 1 - margin);
    y = std::clamp(y, margin, side - 1 - margin);
    for (int step = 0; step <= cfg.crack_steps; ++step) {
        const int px = static_cast<int>(std::lround(x)), py = static_cast<int>(std::lround(y));
        paint(canvas, mask, side, px, py, kDark);
        if (width == 2) {
            // Thicken across the dominant direction.
            if (std::abs(std::cos(heading)) > std::abs(std::sin(heading)))
                paint(canvas, mask, side, px, py + 1, kDark);
            else
                paint(canvas, mask, side, px + 1, py, kDark);
        }
        heading += 0.15 * rng.normal();
        double nx = x + std::cos(heading), ny = y + std::sin(heading);
        if (nx < margin || nx > side - 1 - margin) {
            heading = std::numbers::pi - heading;
            nx = x + std::cos(heading);
        }
        if (ny < margin || ny > side - 1 - margin) {
            heading = -heading;
            ny = y + std::sin(heading);
        }
        x = std::clamp(nx, margin, side - 1 - margin);
        y = std::clamp(ny, margin, side - 1 - margin);
    }
    auto img = finish(canvas, side, cfg.noise_sigma, rng);
    return {std::move(img), std::move(mask), static_cast<double>(cfg.crack_steps)};
}

inline Rendering disk(const SynthConfig& cfg, Rng& rng, int r_min, int r_max) {
    const int side = cfg.image_side;
    auto canvas = background(rng, side);
    BinaryImage mask(side, side);
    const int r = static_cast<int>(rng.uniform_int(r_min, r_max));
    const int lo = r + 1, hi = side - r - 2;
    const int cx = static_cast<int>(rng.uniform_int(lo, std::max(lo, hi)));
    const int cy = static_cast<int>(rng.uniform_int(lo, std::max(lo, hi)));
    for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) paint(canvas, mask, side, x, y, kDark);
    auto img = finish(canvas, side, cfg.noise_sigma, rng);
    return {std::move(img), std::move(mask), static_cast<double>(r)};
}

inline Rendering spatter(const SynthConfig& cfg, Rng& rng) {
    const int side = cfg.image_side;
    auto canvas = background(rng, side);
    BinaryImage mask(side, side);
    const int blobs = static_cast<int>(rng.uniform_int(cfg.spatter_blobs_min, cfg.spatter_blobs_max));
    const double heading = rng.uniform(0.0, std::numbers::pi);
    const double length = side * 0.6;
    const double cx = side / 2.0 + rng.uniform(-side * 0.1, side * 0.1);
    const double cy = side / 2.0 + rng.uniform(-side * 0.1, side * 0.1);
    const double ux = std::cos(heading), uy = std::sin(heading);
    for (int b = 0; b < blobs; ++b) {
        const double t = rng.uniform(-0.5, 0.5) * length;
        const double off = 2.0 * rng.normal();
        const double bx = cx + t * ux - off * uy;
        const double by = cy + t * uy + off * ux;
        const double a = rng.uniform(1.5, 3.5), c = rng.uniform(1.0, 2.5);
        const double rot = rng.uniform(0.0, std::numbers::pi);
        const double cr = std::cos(rot), sr = std::sin(rot);
        const int reach = static_cast<int>(std::ceil(a));
        for (int y = static_cast<int>(by) - reach; y <= static_cast<int>(by) + reach; ++y)
            for (int x = static_cast<int>(bx) - reach; x <= static_cast<int>(bx) + reach; ++x) {
                const double dx = x - bx, dy = y - by;
                const double u = (dx * cr + dy * sr) / a, v = (-dx * sr + dy * cr) / c;
                if (u * u + v * v <= 1.0) paint(canvas, mask, side, x, y, kBright);
            }
    }
    auto img = finish(canvas, side, cfg.noise_sigma, rng);
    return {std::move(img), std::move(mask), static_cast<double>(blobs)};
}

}  // namespace detail

// Draws one image of class `c` from `rng`.
inline Rendering render(DefectClass c, const SynthConfig& cfg, Rng& rng) {
    switch (c) {
        case DefectClass::Crack: return detail::crack(cfg, rng);
        case DefectClass::Pinhole: return detail::disk(cfg, rng, 1, cfg.pinhole_radius_max);
        case DefectClass::Hole: return detail::disk(cfg, rng, cfg.hole_radius_min, cfg.image_side / 3);
        case DefectClass::Spatter: return detail::spatter(cfg, rng);
    }
    throw ParameterError("unknown defect class");
}

// Image `index` of a split is drawn from its own derived stream, so any
// subset can be regenerated (or generated in parallel) independently.
inline Rendering render_indexed(DefectClass c, const SynthConfig& cfg, Split split, std::size_t index) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(split) + 1, index));
    return render(c, cfg, rng);
}

struct SynthData {
    PatchSet train{Split::train};
    PatchSet test{Split::test};
    PatchSet pool{Split::pool};
};

inline std::string patch_id(Split s, std::size_t i) {
    std::string n = std::to_string(i);
    return std::string(to_string(s)) + "-" + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
}

/// Labeled train/test sets hold `*_per_class` images of every class in
/// class-interleaved order; the pool holds `pool_count` images with classes
/// cycling 0..3, unlabeled, with the truth kept for evaluation only.
inline SynthData synthesize(const SynthConfig& cfg) {
    cfg.validate();
    SynthData out;
    auto fill_labeled = [&](PatchSet& set, int per_class) {
        const auto n = static_cast<std::size_t>(per_class) * kDefectClassCount;
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<DefectClass>(i % kDefectClassCount);
            auto r = render_indexed(c, cfg, set.split(), i);
            set.add({patch_id(set.split(), i), std::move(r.image), static_cast<ClassId>(c), Provenance::synthetic(),
                     1.0});
        }
    };
    fill_labeled(out.train, cfg.train_per_class);
    fill_labeled(out.test, cfg.test_per_class);
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.pool_count); ++i) {
        const auto c = static_cast<DefectClass>(i % kDefectClassCount);
        auto r = render_indexed(c, cfg, Split::pool, i);
        out.pool.add({patch_id(Split::pool, i), std::move(r.image), std::nullopt, Provenance::synthetic(), 1.0},
                     static_cast<ClassId>(c));
    }
    return out;
}

}  // namespace defectlab::synth
