#pragma once

// Binary PGM (P5) / PPM (P6) reading and writing, maxval 255 only.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "error.hpp"
#include "image.hpp"

namespace defectlab::pnm {

namespace detail {

struct Header {
    std::string magic;
    int width = 0;
    int height = 0;
    int maxval = 0;
    std::size_t data_offset = 0;
};

inline Header parse_header(const std::string& bytes) {
    Header h;
    std::size_t pos = 0;
    auto skip_space_and_comments = [&] {
        while (pos < bytes.size()) {
            const auto c = static_cast<unsigned char>(bytes[pos]);
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(c)) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_token = [&]() -> std::string {
        skip_space_and_comments();
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#') ++pos;
        if (start == pos) throw FormatError("truncated PNM header");
        return bytes.substr(start, pos - start);
    };
    auto read_int = [&](const char* what) {
        const auto tok = read_token();
        try {
            std::size_t used = 0;
            const int v = std::stoi(tok, &used);
            if (used != tok.size()) throw FormatError("");
            return v;
        } catch (const std::exception&) {
            throw FormatError(std::string("invalid PNM ") + what + " '" + tok + "'");
        }
    };
    h.magic = read_token();
    h.width = read_int("width");
    h.height = read_int("height");
    h.maxval = read_int("maxval");
    // Exactly one whitespace byte separates the header from the raster.
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw FormatError("missing whitespace after PNM header");
    h.data_offset = pos + 1;
    return h;
}

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

template <int Channels>
Raster<Channels> decode(const std::string& bytes, const char* expected_magic) {
    const Header h = parse_header(bytes);
    if (h.magic != expected_magic)
        throw FormatError("expected PNM magic " + std::string(expected_magic) + ", got '" + h.magic + "'");
    if (h.width <= 0 || h.height <= 0) throw FormatError("PNM dimensions must be positive");
    if (h.maxval != 255) throw FormatError("PNM maxval must be 255, got " + std::to_string(h.maxval));
    const std::size_t n = static_cast<std::size_t>(h.width) * h.height * Channels;
    if (bytes.size() < h.data_offset + n) throw FormatError("truncated PNM raster");
    std::vector<std::uint8_t> data(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + n));
    return Raster<Channels>(h.width, h.height, std::move(data));
}

template <int Channels>
std::string encode(const Raster<Channels>& img, const char* magic) {
    std::string out = std::string(magic) + "\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) +
                      "\n255\n";
    out.append(reinterpret_cast<const char*>(img.data().data()), img.data().size());
    return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace detail

inline GrayImage decode_pgm(const std::string& bytes) { return detail::decode<1>(bytes, "P5"); }
inline RgbImage decode_ppm(const std::string& bytes) { return detail::decode<3>(bytes, "P6"); }
inline std::string encode_pgm(const GrayImage& img) { return detail::encode(img, "P5"); }
inline std::string encode_ppm(const RgbImage& img) { return detail::encode(img, "P6"); }

inline GrayImage read_pgm(const std::filesystem::path& path) { return decode_pgm(detail::slurp(path)); }
inline RgbImage read_ppm(const std::filesystem::path& path) { return decode_ppm(detail::slurp(path)); }
inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    detail::write_file(path, encode_pgm(img));
}
inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
    detail::write_file(path, encode_ppm(img));
}

// Reads a P5 or P6 file; color input is returned through `rgb` and the
// function returns false, gray input returns true.
inline bool read_any(const std::filesystem::path& path, GrayImage& gray, RgbImage& rgb) {
    const auto bytes = detail::slurp(path);
    if (bytes.rfind("P5", 0) == 0) {
        gray = decode_pgm(bytes);
        return true;
    }
    if (bytes.rfind("P6", 0) == 0) {
        rgb = decode_ppm(bytes);
        return false;
    }
    throw FormatError("'" + path.string() + "' is neither P5 nor P6");
}

}  // namespace defectlab::pnm
