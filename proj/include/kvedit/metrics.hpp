// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>

#include "kvedit/errors.hpp"
#include "kvedit/mask.hpp"
#include "kvedit/tensor.hpp"

namespace kvedit {

inline constexpr double kPsnrCapDb = 99.0;

/// Mean squared difference over all elements.
template <class T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.size() == 0) throw NumericError("mse: empty input");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

/// Mean squared difference of [C x H x W] images over the pixels where
/// `region` is 1, across all channels.
template <class T>
double mse(const Tensor<T>& a, const Tensor<T>& b, const PixelMask& region) {
    if (a.shape() != b.shape() || a.rank() != 3)
        throw ShapeError("mse: expected matching [C x H x W] images, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
    region.require_size(H, W, "mse");
    double s = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                if (!region.at(y, x)) continue;
                const std::size_t k = (c * H + y) * W + x;
                const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
                s += d * d;
                ++n;
            }
    if (n == 0) throw NumericError("mse: empty region");
    return s / static_cast<double>(n);
}

/// 10 log10(max^2 / mse), capped at 99 dB when mse < 1e-10.
inline double psnr_from_mse(double m, double max_value = 1.0) {
    if (m < 1e-10) return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(max_value * max_value / m));
}

template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double max_value = 1.0) {
    return psnr_from_mse(mse(a, b), max_value);
}

template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, const PixelMask& region, double max_value = 1.0) {
    return psnr_from_mse(mse(a, b, region), max_value);
}

struct RegionMetricReport {
    double mse_full = 0;
    std::optional<double> mse_bg; ///< absent when the mask covers everything
    std::optional<double> mse_fg; ///< absent when the mask is empty
    double psnr_full = 0;
    std::optional<double> psnr_bg;
};

/// Full-image and per-region errors; `mask` 1 = foreground.
template <class T>
RegionMetricReport region_report(const Tensor<T>& edited, const Tensor<T>& source, const PixelMask& mask) {
    RegionMetricReport r;
    r.mse_full = mse(edited, source);
    r.psnr_full = psnr_from_mse(r.mse_full);
    const PixelMask bg = mask.inverted();
    if (bg.count()) {
        r.mse_bg = mse(edited, source, bg);
        r.psnr_bg = psnr_from_mse(*r.mse_bg);
    }
    if (mask.count()) r.mse_fg = mse(edited, source, mask);
    return r;
}

} // namespace kvedit
