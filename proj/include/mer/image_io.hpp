#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <string>
#include <vector>

#include "mer/dsp.hpp"

namespace mer {

/// One CSV row per matrix row (per frame for spectrograms), no header.
inline void write_matrix_csv(const std::filesystem::path& path, const Matrix<double>& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << std::setprecision(9);
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            if (c) out << ',';
            out << m(r, c);
        }
        out << '\n';
    }
}

namespace detail {

inline void png_chunk(std::vector<std::uint8_t>& out, const char* tag, const std::vector<std::uint8_t>& body) {
    const auto len = static_cast<std::uint32_t>(body.size());
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(len >> s));
    const std::size_t crc_from = out.size();
    out.insert(out.end(), tag, tag + 4);
    out.insert(out.end(), body.begin(), body.end());
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, out.data() + crc_from, static_cast<uInt>(out.size() - crc_from)));
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(crc >> s));
}

}  // namespace detail

/// Encodes an 8-bit grayscale PNG from rows of pixel bytes.
inline std::vector<std::uint8_t> encode_png_gray(std::size_t width, std::size_t height,
                                                 const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != width * height) throw std::invalid_argument("pixel buffer size mismatch");
    std::vector<std::uint8_t> raw;
    raw.reserve(height * (width + 1));
    for (std::size_t y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * width),
                   pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * width));
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> z(zlen);
    if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw std::runtime_error("zlib compression failed");
    }
    z.resize(zlen);

    std::vector<std::uint8_t> png{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    std::vector<std::uint8_t> ihdr;
    for (auto v : {static_cast<std::uint32_t>(width), static_cast<std::uint32_t>(height)}) {
        for (int s = 24; s >= 0; s -= 8) ihdr.push_back(static_cast<std::uint8_t>(v >> s));
    }
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // 8-bit grayscale
    detail::png_chunk(png, "IHDR", ihdr);
    detail::png_chunk(png, "IDAT", z);
    detail::png_chunk(png, "IEND", {});
    return png;
}

/// Renders a frames x bands matrix with time running left to right and the
/// lowest band at the bottom, min-max scaled to 0..255.
inline void write_spectrogram_png(const std::filesystem::path& path, const Matrix<double>& m) {
    if (m.values.empty()) throw std::invalid_argument("empty spectrogram");
    const auto [lo_it, hi_it] = std::minmax_element(m.values.begin(), m.values.end());
    const double lo = *lo_it, span = std::max(*hi_it - *lo_it, 1e-12);
    const std::size_t width = m.rows, height = m.cols;
    std::vector<std::uint8_t> px(width * height);
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t band = height - 1 - y;
        for (std::size_t x = 0; x < width; ++x) {
            px[y * width + x] = static_cast<std::uint8_t>(std::lround(255.0 * (m(x, band) - lo) / span));
        }
    }
    const auto png = encode_png_gray(width, height, px);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
}

}  // namespace mer
