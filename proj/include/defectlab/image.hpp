#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace defectlab {

// Row-major 8-bit raster with `Channels` interleaved channels.
template <int Channels>
class Raster {
    static_assert(Channels == 1 || Channels == 3);

public:
    static constexpr int channels = Channels;

    Raster() = default;

    Raster(int width, int height, std::uint8_t fill = 0) : width_(width), height_(height) {
        if (width <= 0 || height <= 0)
            throw ParameterError("raster dimensions must be positive, got " + std::to_string(width) + "x" +
                                 std::to_string(height));
        data_.assign(static_cast<std::size_t>(width) * height * Channels, fill);
    }

    Raster(int width, int height, std::vector<std::uint8_t> data) : width_(width), height_(height), data_(std::move(data)) {
        if (width <= 0 || height <= 0) throw ParameterError("raster dimensions must be positive");
        if (data_.size() != static_cast<std::size_t>(width) * height * Channels)
            throw ParameterError("raster data length " + std::to_string(data_.size()) + " does not match " +
                                 std::to_string(width) + "x" + std::to_string(height) + "x" +
                                 std::to_string(Channels));
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }

    std::uint8_t& at(int x, int y, int c = 0) noexcept {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * Channels + c];
    }
    std::uint8_t at(int x, int y, int c = 0) const noexcept {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * Channels + c];
    }

    // Edge-replicated access for coordinates outside the raster.
    std::uint8_t clamped(int x, int y, int c = 0) const noexcept {
        return at(std::clamp(x, 0, width_ - 1), std::clamp(y, 0, height_ - 1), c);
    }

    std::span<std::uint8_t> data() noexcept { return data_; }
    std::span<const std::uint8_t> data() const noexcept { return data_; }
    const std::vector<std::uint8_t>& bytes() const noexcept { return data_; }

    friend bool operator==(const Raster&, const Raster&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> data_;
};

using GrayImage = Raster<1>;
using RgbImage = Raster<3>;

// Gray raster whose every value is 0 or 255.
class BinaryImage {
public:
    BinaryImage() = default;
    BinaryImage(int width, int height) : image_(width, height, 0) {}

    explicit BinaryImage(GrayImage img) : image_(std::move(img)) {
        for (auto v : image_.data())
            if (v != 0 && v != 255) throw ParameterError("binary image values must be 0 or 255");
    }

    int width() const noexcept { return image_.width(); }
    int height() const noexcept { return image_.height(); }

    bool test(int x, int y) const noexcept { return image_.at(x, y) != 0; }
    void set(int x, int y, bool on) noexcept { image_.at(x, y) = on ? 255 : 0; }

    const GrayImage& gray() const noexcept { return image_; }
    std::uint8_t at(int x, int y) const noexcept { return image_.at(x, y); }

    std::size_t count() const noexcept {
        return static_cast<std::size_t>(std::count(image_.data().begin(), image_.data().end(), std::uint8_t{255}));
    }

    friend bool operator==(const BinaryImage&, const BinaryImage&) = default;

private:
    GrayImage image_;
};

inline std::uint8_t clamp_to_u8(double v) noexcept {
    // Round half away from zero, then saturate.
    const double r = v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5);
    return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

}  // namespace defectlab
