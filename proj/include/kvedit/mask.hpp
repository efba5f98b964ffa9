// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kvedit/errors.hpp"

namespace kvedit {

/// H x W binary raster; 1 marks the edit region (foreground).
struct PixelMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;

    PixelMask() = default;
    PixelMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), bits(h * w, fill ? 1 : 0) {}

    static PixelMask rect(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t y1,
                          std::size_t x1) {
        PixelMask m(h, w);
        for (std::size_t y = y0; y < y1 && y < h; ++y)
            for (std::size_t x = x0; x < x1 && x < w; ++x) m.set(y, x, true);
        return m;
    }

    bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
    void set(std::size_t y, std::size_t x, bool v) { bits[y * width + x] = v ? 1 : 0; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : bits) n += b ? 1 : 0;
        return n;
    }
    bool empty_region() const { return count() == 0; }

    PixelMask inverted() const {
        PixelMask m = *this;
        for (auto& b : m.bits) b = b ? 0 : 1;
        return m;
    }

    void require_size(std::size_t h, std::size_t w, const char* op) const {
        if (height != h || width != w || bits.size() != h * w)
            throw ShapeError(std::string(op) + ": mask is " + std::to_string(height) + "x" + std::to_string(width) +
                             ", image is " + std::to_string(h) + "x" + std::to_string(w));
    }

    friend bool operator==(const PixelMask&, const PixelMask&) = default;
};

} // namespace kvedit
