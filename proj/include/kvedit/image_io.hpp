// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kvedit/errors.hpp"
#include "kvedit/mask.hpp"
#include "kvedit/tensor.hpp"
#include "kvedit/tensor_io.hpp"

namespace kvedit {

// Netpbm rasters. PPM (P6) stores RGB previews quantized to 8 bits; PGM (P5)
// stores masks, foreground where the byte is > 127.

namespace detail {

struct PnmHeader {
    std::size_t width = 0, height = 0, maxval = 0;
};

inline PnmHeader read_pnm_header(std::istream& is, const char* magic, const std::string& src) {
    char m[2] = {0, 0};
    if (!is.read(m, 2) || m[0] != magic[0] || m[1] != magic[1])
        throw IoError(src + ": expected magic '" + std::string(magic) + "' at byte offset 0");
    auto field = [&](const char* what) -> std::size_t {
        int ch = is.get();
        for (;;) {
            while (ch != EOF && std::isspace(ch)) ch = is.get();
            if (ch == '#') {
                while (ch != EOF && ch != '\n') ch = is.get();
                continue;
            }
            break;
        }
        const auto at = static_cast<long long>(is.tellg()) - 1;
        if (ch == EOF || !std::isdigit(ch))
            throw IoError(src + ": malformed header, expected " + what + " at byte offset " + std::to_string(at));
        std::size_t v = 0;
        while (ch != EOF && std::isdigit(ch)) {
            v = v * 10 + static_cast<std::size_t>(ch - '0');
            if (v > (1u << 24)) throw IoError(src + ": header value too large at byte offset " + std::to_string(at));
            ch = is.get();
        }
        if (ch == EOF || !std::isspace(ch))
            throw IoError(src + ": malformed header after " + what + " at byte offset " +
                          std::to_string(static_cast<long long>(is.tellg()) - 1));
        return v;
    };
    PnmHeader h;
    h.width = field("width");
    h.height = field("height");
    h.maxval = field("maxval");
    if (h.width == 0 || h.height == 0) throw IoError(src + ": zero image dimension in header");
    if (h.maxval != 255) throw IoError(src + ": only 8-bit rasters (maxval 255) are supported");
    return h;
}

inline std::vector<unsigned char> read_payload(std::istream& is, std::size_t n, const std::string& src) {
    std::vector<unsigned char> buf(n);
    const auto at = static_cast<long long>(is.tellg());
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
        throw IoError(src + ": truncated raster payload starting at byte offset " + std::to_string(at));
    if (is.peek() != std::char_traits<char>::eof())
        throw IoError(src + ": trailing bytes after raster payload at byte offset " +
                      std::to_string(static_cast<long long>(is.tellg())));
    return buf;
}

inline unsigned char quantize(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

inline std::string lower_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e;
}

} // namespace detail

/// Writes a [3 x H x W] image as binary PPM. Values are clamped to [0,1].
template <class T>
void write_ppm(const std::filesystem::path& path, const Tensor<T>& img) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw ShapeError("write_ppm: expected a [3 x H x W] image, got " + shape_str(img.shape()));
    const std::size_t H = img.dim(1), W = img.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "P6\n" << W << ' ' << H << "\n255\n";
    std::vector<unsigned char> buf(3 * H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                buf[(y * W + x) * 3 + c] = detail::quantize(static_cast<double>(img[(c * H + y) * W + x]));
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

template <class T>
Tensor<T> read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    const auto h = detail::read_pnm_header(is, "P6", path.string());
    const auto buf = detail::read_payload(is, 3 * h.width * h.height, path.string());
    Tensor<T> img({3, h.height, h.width});
    for (std::size_t y = 0; y < h.height; ++y)
        for (std::size_t x = 0; x < h.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img[(c * h.height + y) * h.width + x] =
                    static_cast<T>(static_cast<double>(buf[(y * h.width + x) * 3 + c]) / 255.0);
    return img;
}

inline void write_pgm_mask(const std::filesystem::path& path, const PixelMask& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "P5\n" << m.width << ' ' << m.height << "\n255\n";
    std::vector<unsigned char> buf(m.bits.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = m.bits[i] ? 255 : 0;
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

inline PixelMask read_pgm_mask(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    const auto h = detail::read_pnm_header(is, "P5", path.string());
    const auto buf = detail::read_payload(is, h.width * h.height, path.string());
    PixelMask m(h.height, h.width);
    for (std::size_t i = 0; i < buf.size(); ++i) m.bits[i] = buf[i] > 127 ? 1 : 0;
    return m;
}

/// Chooses the format by extension: .tnsr (exact) or .ppm (8-bit).
template <class T>
Tensor<T> read_image(const std::filesystem::path& path) {
    const std::string e = detail::lower_ext(path);
    if (e == ".tnsr") {
        Tensor<T> t = load_tnsr<T>(path);
        if (t.rank() != 3) throw IoError(path.string() + ": image tensor must have rank 3, got " + shape_str(t.shape()));
        return t;
    }
    if (e == ".ppm") return read_ppm<T>(path);
    throw IoError(path.string() + ": unsupported image extension '" + e + "' (use .tnsr or .ppm)");
}

template <class T>
void write_image(const std::filesystem::path& path, const Tensor<T>& img) {
    const std::string e = detail::lower_ext(path);
    if (e == ".tnsr") return save_tnsr(path, img);
    if (e == ".ppm") return write_ppm(path, img);
    throw IoError(path.string() + ": unsupported image extension '" + e + "' (use .tnsr or .ppm)");
}

} // namespace kvedit
