#pragma once

// Raster preprocessing chain: grayscale -> Gaussian blur -> non-local means
// -> (adaptive threshold | Canny). Every stage replicates edge pixels at the
// border, computes in double precision and quantizes only on output.

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "image.hpp"

namespace defectlab::imaging {

enum class CnnInput { denoised, thresholded, edges };

inline std::string_view to_string(CnnInput v) {
    switch (v) {
        case CnnInput::denoised: return "denoised";
        case CnnInput::thresholded: return "thresholded";
        case CnnInput::edges: return "edges";
    }
    return "denoised";
}

inline CnnInput cnn_input_from_string(std::string_view s) {
    if (s == "denoised") return CnnInput::denoised;
    if (s == "thresholded") return CnnInput::thresholded;
    if (s == "edges") return CnnInput::edges;
    throw ParameterError("unknown cnn_input '" + std::string(s) + "' (expected denoised|thresholded|edges)");
}

struct PipelineConfig {
    int blur_kernel = 5;
    double blur_sigma = 1.0;
    double nlm_h = 10.0;
    int nlm_template = 7;
    int nlm_search = 21;
    double nlm_sigma = 0.0;  // noise offset; 0 gives pure patch-distance weighting
    int at_block = 11;
    double at_c = 2.0;
    double canny_low = 50.0;
    double canny_high = 150.0;
    CnnInput cnn_input = CnnInput::denoised;

    void validate() const {
        auto odd = [](int v) { return v > 0 && v % 2 == 1; };
        if (!odd(blur_kernel) || blur_kernel < 3) throw ParameterError("blur_kernel must be odd and >= 3");
        if (!(blur_sigma > 0)) throw ParameterError("blur_sigma must be positive");
        if (!(nlm_h > 0)) throw ParameterError("nlm_h must be positive");
        if (!odd(nlm_template) || !odd(nlm_search)) throw ParameterError("nlm_template and nlm_search must be odd");
        if (nlm_template >= nlm_search) throw ParameterError("nlm_template must be smaller than nlm_search");
        if (nlm_sigma < 0) throw ParameterError("nlm_sigma must be non-negative");
        if (!odd(at_block) || at_block < 3) throw ParameterError("at_block must be odd and >= 3");
        if (!(canny_low >= 0 && canny_low < canny_high && canny_high <= 255))
            throw ParameterError("canny thresholds must satisfy 0 <= low < high <= 255");
    }
};

inline GrayImage to_grayscale(const RgbImage& img) {
    GrayImage out(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            out.at(x, y) = clamp_to_u8(0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2));
    return out;
}

// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
inline std::vector<double> gaussian_kernel(int size, double sigma) {
    if (size <= 0 || size % 2 == 0) throw ParameterError("Gaussian kernel size must be odd, got " + std::to_string(size));
    if (!(sigma > 0)) throw ParameterError("Gaussian sigma must be positive");
    const int r = size / 2;
    std::vector<double> k(static_cast<std::size_t>(size));
    double sum = 0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        sum += k[static_cast<std::size_t>(i + r)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

namespace detail {

// Dense double plane used between the passes of a single stage.
struct Plane {
    int width = 0;
    int height = 0;
    std::vector<double> v;

    Plane(int w, int h) : width(w), height(h), v(static_cast<std::size_t>(w) * h, 0.0) {}
    double& at(int x, int y) { return v[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return v[static_cast<std::size_t>(y) * width + x]; }
    double clamped(int x, int y) const {
        return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
    }
};

inline Plane to_plane(const GrayImage& img) {
    Plane p(img.width(), img.height());
    for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = img.data()[i];
    return p;
}

inline Plane separable_smooth(const Plane& in, const std::vector<double>& k) {
    const int r = static_cast<int>(k.size()) / 2;
    Plane tmp(in.width, in.height), out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            double s = 0;
            for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * in.clamped(x + i, y);
            tmp.at(x, y) = s;
        }
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            double s = 0;
            for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp.clamped(x, y + i);
            out.at(x, y) = s;
        }
    return out;
}

// Summed-area table over an integer plane padded by `pad` replicated pixels
// on every side. Entry (x, y) holds the sum over padded rows < y, cols < x.
class IntegralImage {
public:
    template <class ValueAt>
    IntegralImage(int width, int height, ValueAt value_at) : w_(width + 1), h_(height + 1) {
        table_.assign(static_cast<std::size_t>(w_) * h_, 0);
        for (int y = 0; y < height; ++y) {
            std::int64_t row = 0;
            for (int x = 0; x < width; ++x) {
                row += value_at(x, y);
                table_[idx(x + 1, y + 1)] = table_[idx(x + 1, y)] + row;
            }
        }
    }

    // Sum over [x0, x1) x [y0, y1) in table coordinates.
    std::int64_t sum(int x0, int y0, int x1, int y1) const {
        return table_[idx(x1, y1)] - table_[idx(x0, y1)] - table_[idx(x1, y0)] + table_[idx(x0, y0)];
    }

private:
    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * w_ + x; }
    int w_, h_;
    std::vector<std::int64_t> table_;
};

}  // namespace detail

inline GrayImage gaussian_blur(const GrayImage& img, int kernel, double sigma) {
    const auto k = gaussian_kernel(kernel, sigma);
    const auto smoothed = detail::separable_smooth(detail::to_plane(img), k);
    GrayImage out(img.width(), img.height());
    for (std::size_t i = 0; i < smoothed.v.size(); ++i) out.data()[i] = clamp_to_u8(smoothed.v[i]);
    return out;
}

/// Non-local means: each pixel becomes the weighted mean of its search window,
/// weighted by exp(-max(d2 - 2 sigma^2, 0) / h^2) where d2 is the mean squared
/// difference between the template patches around the two pixels.
///
/// Patch distances are accumulated as exact integers through one summed-area
/// table per search offset, so the result is identical to the direct
/// quadruple loop while costing O(pixels x search^2).
inline GrayImage nlm_denoise(const GrayImage& img, double h, int templ, int search, double sigma = 0.0) {
    if (!(h > 0)) throw ParameterError("NLM filter strength h must be positive");
    if (templ <= 0 || search <= 0 || templ % 2 == 0 || search % 2 == 0)
        throw ParameterError("NLM template and search sizes must be odd");
    if (templ >= search) throw ParameterError("NLM template must be smaller than the search window");
    if (search > img.width() || search > img.height())
        throw ParameterError("NLM search window " + std::to_string(search) + " larger than image " +
                             std::to_string(img.width()) + "x" + std::to_string(img.height()));

    const int W = img.width(), H = img.height();
    const int tr = templ / 2, sr = search / 2;
    const double inv_n = 1.0 / (static_cast<double>(templ) * templ);
    const double offset = 2.0 * sigma * sigma;
    const double inv_h2 = 1.0 / (h * h);

    std::vector<double> acc(static_cast<std::size_t>(W) * H, 0.0), wsum(acc.size(), 0.0);
    for (int dy = -sr; dy <= sr; ++dy)
        for (int dx = -sr; dx <= sr; ++dx) {
            const detail::IntegralImage sq(W + 2 * tr, H + 2 * tr, [&](int px, int py) -> std::int64_t {
                const int x = px - tr, y = py - tr;
                const int d = int(img.clamped(x, y)) - int(img.clamped(x + dx, y + dy));
                return d * d;
            });
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double d2 = static_cast<double>(sq.sum(x, y, x + templ, y + templ)) * inv_n;
                    const double w = std::exp(-std::max(d2 - offset, 0.0) * inv_h2);
                    const auto i = static_cast<std::size_t>(y) * W + x;
                    acc[i] += w * img.clamped(x + dx, y + dy);
                    wsum[i] += w;
                }
        }
    GrayImage out(W, H);
    for (std::size_t i = 0; i < acc.size(); ++i) out.data()[i] = clamp_to_u8(acc[i] / wsum[i]);
    return out;
}

// out = 255 where pixel > (block mean - c), else 0.
inline BinaryImage adaptive_threshold(const GrayImage& img, int block, double c) {
    if (block < 3 || block % 2 == 0) throw ParameterError("adaptive threshold block must be odd and >= 3");
    const int W = img.width(), H = img.height(), r = block / 2;
    const detail::IntegralImage sums(W + 2 * r, H + 2 * r,
                                     [&](int px, int py) -> std::int64_t { return img.clamped(px - r, py - r); });
    const double n = static_cast<double>(block) * block;
    BinaryImage out(W, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double mean = static_cast<double>(sums.sum(x, y, x + block, y + block)) / n;
            out.set(x, y, img.at(x, y) > mean - c);
        }
    return out;
}

struct CannyGradients {
    detail::Plane magnitude;
    std::vector<std::uint8_t> direction;  // 0: 0deg, 1: 45deg, 2: 90deg, 3: 135deg
};

// Smoothing (5x5, sigma 1.4) followed by 3x3 Sobel, L2 magnitude and the
// gradient direction quantized to four bins.
inline CannyGradients canny_gradients(const GrayImage& img) {
    const auto smooth = detail::separable_smooth(detail::to_plane(img), gaussian_kernel(5, 1.4));
    const int W = img.width(), H = img.height();
    CannyGradients g{detail::Plane(W, H), std::vector<std::uint8_t>(static_cast<std::size_t>(W) * H, 0)};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            auto p = [&](int dx, int dy) { return smooth.clamped(x + dx, y + dy); };
            const double gx = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
            const double gy = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
            g.magnitude.at(x, y) = std::sqrt(gx * gx + gy * gy);
            // Angle in [0, 180); image y grows downward so 45deg runs from
            // top-left to bottom-right.
            double angle = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
            if (angle < 0) angle += 180.0;
            std::uint8_t bin;
            if (angle < 22.5 || angle >= 157.5)
                bin = 0;
            else if (angle < 67.5)
                bin = 1;
            else if (angle < 112.5)
                bin = 2;
            else
                bin = 3;
            g.direction[static_cast<std::size_t>(y) * W + x] = bin;
        }
    return g;
}

// Non-maximum suppression. A pixel survives when it is strictly larger than
// its neighbour on the negative side of the gradient and not smaller than
// the one on the positive side, so plateaus of width two thin to one pixel.
inline detail::Plane non_maximum_suppression(const CannyGradients& g) {
    const auto& m = g.magnitude;
    detail::Plane out(m.width, m.height);
    static constexpr int step[4][2] = {{1, 0}, {1, 1}, {0, 1}, {-1, 1}};
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            const double v = m.at(x, y);
            if (v <= 0) continue;
            const auto bin = g.direction[static_cast<std::size_t>(y) * m.width + x];
            const int sx = step[bin][0], sy = step[bin][1];
            const double prev = m.clamped(x - sx, y - sy);
            const double next = m.clamped(x + sx, y + sy);
            if (v > prev && v >= next) out.at(x, y) = v;
        }
    return out;
}

// Double-threshold hysteresis on a suppressed magnitude plane: strong pixels
// (>= high) seed an 8-connected flood through weak pixels (>= low).
inline BinaryImage hysteresis(const detail::Plane& nms, double low, double high) {
    const int W = nms.width, H = nms.height;
    BinaryImage out(W, H);
    std::deque<std::pair<int, int>> queue;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (nms.at(x, y) >= high) {
                out.set(x, y, true);
                queue.emplace_back(x, y);
            }
    while (!queue.empty()) {
        const auto [x, y] = queue.front();
        queue.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int nx = x + dx, ny = y + dy;
                if (nx < 0 || ny < 0 || nx >= W || ny >= H || out.test(nx, ny)) continue;
                const double v = nms.at(nx, ny);
                if (v >= low && v > 0) {
                    out.set(nx, ny, true);
                    queue.emplace_back(nx, ny);
                }
            }
    }
    return out;
}

inline BinaryImage canny(const GrayImage& img, double low, double high) {
    if (!(low >= 0 && low < high)) throw ParameterError("Canny thresholds must satisfy 0 <= low < high");
    return hysteresis(non_maximum_suppression(canny_gradients(img)), low, high);
}

// Runs grayscale (color input only), blur and NLM, then returns the raster
// selected by cfg.cnn_input.
inline GrayImage preprocess(const GrayImage& gray, const PipelineConfig& cfg) {
    cfg.validate();
    const auto blurred = gaussian_blur(gray, cfg.blur_kernel, cfg.blur_sigma);
    auto denoised = nlm_denoise(blurred, cfg.nlm_h, cfg.nlm_template, cfg.nlm_search, cfg.nlm_sigma);
    switch (cfg.cnn_input) {
        case CnnInput::denoised: return denoised;
        case CnnInput::thresholded: return adaptive_threshold(denoised, cfg.at_block, cfg.at_c).gray();
        case CnnInput::edges: return canny(denoised, cfg.canny_low, cfg.canny_high).gray();
    }
    return denoised;
}

inline GrayImage preprocess(const RgbImage& rgb, const PipelineConfig& cfg) { return preprocess(to_grayscale(rgb), cfg); }

}  // namespace defectlab::imaging
