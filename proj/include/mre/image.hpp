#pragma once

// Minimal raster support: binary and ASCII netpbm (PGM/PPM) decode/encode,
// cropping, and grayscale histograms.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mre/error.hpp"

namespace mre {

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;  // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;

    std::uint8_t luma(std::size_t x, std::size_t y) const {
        const std::size_t i = (y * width + x) * channels;
        if (channels == 1) return pixels[i];
        // ITU-R BT.601 integer weights
        return static_cast<std::uint8_t>((299u * pixels[i] + 587u * pixels[i + 1] + 114u * pixels[i + 2] + 500u) / 1000u);
    }
};

struct BoundingBox {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t w = 0;
    std::size_t h = 0;
    bool operator==(const BoundingBox&) const = default;
};

namespace detail {

class PnmScanner {
public:
    explicit PnmScanner(std::string_view d) : d_(d) {}

    void skip_space_and_comments() {
        while (pos_ < d_.size()) {
            if (std::isspace(static_cast<unsigned char>(d_[pos_]))) {
                ++pos_;
            } else if (d_[pos_] == '#') {
                while (pos_ < d_.size() && d_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number() {
        skip_space_and_comments();
        if (pos_ >= d_.size() || !std::isdigit(static_cast<unsigned char>(d_[pos_])))
            throw DecodeError("malformed netpbm header");
        std::size_t v = 0;
        while (pos_ < d_.size() && std::isdigit(static_cast<unsigned char>(d_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(d_[pos_] - '0');
            if (v > (1u << 24)) throw DecodeError("netpbm value out of range");
            ++pos_;
        }
        return v;
    }

    std::size_t& cursor() { return pos_; }
    std::string_view data() const { return d_; }

private:
    std::string_view d_;
    std::size_t pos_ = 0;
};

} // namespace detail

// Decodes P2/P3/P5/P6. Anything else raises DecodeError.
inline Image decode_image(std::string_view bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P') throw DecodeError("unsupported image format (expected netpbm)");
    const char kind = bytes[1];
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6')
        throw DecodeError(std::string("unsupported netpbm variant P") + kind);
    detail::PnmScanner sc(bytes.substr(2));
    Image img;
    img.channels = (kind == '3' || kind == '6') ? 3 : 1;
    img.width = sc.number();
    img.height = sc.number();
    const std::size_t maxval = sc.number();
    if (img.width == 0 || img.height == 0) throw DecodeError("image has zero extent");
    if (maxval == 0 || maxval > 255) throw DecodeError("only 8-bit netpbm images are supported");
    const std::size_t n = img.width * img.height * img.channels;
    img.pixels.resize(n);
    auto scale = [&](std::size_t v) {
        if (v > maxval) throw DecodeError("pixel value exceeds maxval");
        return static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
    };
    if (kind == '5' || kind == '6') {
        auto& pos = sc.cursor();
        if (pos >= sc.data().size() || !std::isspace(static_cast<unsigned char>(sc.data()[pos])))
            throw DecodeError("malformed netpbm header");
        ++pos;
        if (sc.data().size() - pos < n) throw DecodeError("truncated netpbm raster");
        for (std::size_t i = 0; i < n; ++i) img.pixels[i] = scale(static_cast<unsigned char>(sc.data()[pos + i]));
    } else {
        for (std::size_t i = 0; i < n; ++i) img.pixels[i] = scale(sc.number());
    }
    return img;
}

// Binary PGM (1 channel) or PPM (3 channels).
inline std::string encode_image(const Image& img) {
    std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    return out;
}

inline bool box_within(const BoundingBox& b, const Image& img) {
    return b.w > 0 && b.h > 0 && b.x + b.w <= img.width && b.y + b.h <= img.height;
}

inline Image crop_image(const Image& img, const BoundingBox& b) {
    if (!box_within(b, img)) throw DecodeError("crop box outside image bounds");
    Image out{b.w, b.h, img.channels, {}};
    out.pixels.reserve(b.w * b.h * img.channels);
    for (std::size_t y = b.y; y < b.y + b.h; ++y) {
        const auto* row = img.pixels.data() + (y * img.width + b.x) * img.channels;
        out.pixels.insert(out.pixels.end(), row, row + b.w * img.channels);
    }
    return out;
}

// Normalised grayscale histogram with `bins` equal-width bins over [0, 255].
inline std::vector<double> gray_histogram(const Image& img, std::size_t bins = 64) {
    std::vector<double> h(bins, 0.0);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) h[img.luma(x, y) * bins / 256] += 1.0;
    const double total = static_cast<double>(img.width * img.height);
    for (auto& v : h) v /= total;
    return h;
}

} // namespace mre
