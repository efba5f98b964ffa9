// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "kvedit/errors.hpp"
#include "kvedit/model.hpp"
#include "kvedit/rng.hpp"

namespace kvedit {

enum class ShapeKind { Square = 0, Disc = 1 };

inline constexpr std::size_t kPaletteSize = 4;
inline constexpr std::array<std::array<double, 3>, kPaletteSize> kPalette{{
    {0.90, 0.15, 0.10}, // red
    {0.15, 0.80, 0.20}, // green
    {0.15, 0.30, 0.95}, // blue
    {0.95, 0.85, 0.10}, // yellow
}};

/// One rendered training image. The class id encodes (shape, color):
/// shape = id / 4, color = id % 4.
template <class T>
struct SyntheticSample {
    Tensor<T> image; ///< [C x S x S], values in [0, 1]
    ConditionId condition;
    ShapeKind shape = ShapeKind::Square;
    std::size_t color = 0;
    double center_x = 0, center_y = 0, radius = 0;
    double background = 0;
};

inline ShapeKind class_shape(std::size_t id) { return static_cast<ShapeKind>(id / kPaletteSize); }
inline std::size_t class_color(std::size_t id) { return id % kPaletteSize; }

/// Renders one shape of class `cls` on a solid background.
template <class T>
Tensor<T> render_shape(const ModelConfig& cfg, std::size_t cls, double cx, double cy, double radius, double background) {
    const std::size_t S = cfg.image_size, C = cfg.channels;
    const auto& rgb = kPalette[class_color(cls)];
    const ShapeKind shape = class_shape(cls);
    Tensor<T> img({C, S, S});
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double dx = (static_cast<double>(x) + 0.5) - cx;
            const double dy = (static_cast<double>(y) + 0.5) - cy;
            const bool inside = shape == ShapeKind::Square ? (std::abs(dx) <= radius && std::abs(dy) <= radius)
                                                           : (dx * dx + dy * dy <= radius * radius);
            for (std::size_t c = 0; c < C; ++c) {
                double v = background;
                if (inside) v = C == 3 ? rgb[c] : (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                img[(c * S + y) * S + x] = static_cast<T>(v);
            }
        }
    return img;
}

/// Sample `index` of the stream identified by `seed`; independent of any
/// other index.
template <class T>
SyntheticSample<T> gen_sample(std::uint64_t seed, std::uint64_t index, const ModelConfig& cfg) {
    if (cfg.num_conditions == 0 || cfg.num_conditions > 2 * kPaletteSize)
        throw ConfigError("dataset: num_conditions must be in [1, " + std::to_string(2 * kPaletteSize) + "]");
    Rng rng = Rng(seed).fork(index);
    SyntheticSample<T> s;
    const double S = static_cast<double>(cfg.image_size);
    s.condition = {static_cast<std::size_t>(rng.below(cfg.num_conditions))};
    s.shape = class_shape(s.condition.id);
    s.color = class_color(s.condition.id);
    s.radius = rng.uniform(S / 5.0, S / 3.0);
    s.center_x = rng.uniform(s.radius, S - s.radius);
    s.center_y = rng.uniform(s.radius, S - s.radius);
    s.background = rng.uniform(0.0, 0.4);
    s.image = render_shape<T>(cfg, s.condition.id, s.center_x, s.center_y, s.radius, s.background);
    return s;
}

template <class T>
std::vector<SyntheticSample<T>> gen_dataset(std::uint64_t seed, std::size_t count, const ModelConfig& cfg) {
    if (count == 0) throw ConfigError("dataset: count must be >= 1");
    std::vector<SyntheticSample<T>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample<T>(seed, i, cfg));
    return out;
}

} // namespace kvedit
