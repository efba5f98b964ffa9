// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "kvedit/kv_edit.hpp"
#include "kvedit/metrics.hpp"

namespace kvedit {

struct DriftResult {
    double bg_mse_vanilla = 0;
    double bg_mse_kvedit = 0;
};

/// Background drift of a full-image edit compared with the cached-K/V edit
/// on the same inputs. Both MSE values are over mask = 0 pixels.
template <class T, VelocityField<T> Field>
DriftResult drift_experiment(const Field& field, const Tensor<T>& x0, const PixelMask& mask, ConditionId c_src,
                             ConditionId c_tgt, const EditConfig& cfg) {
    const PixelMask bg = mask.inverted();
    if (bg.empty_region() || mask.empty_region()) throw ConfigError("drift_experiment: mask must be non-trivial");
    DriftResult r;
    r.bg_mse_vanilla = mse(vanilla_edit(field, x0, c_src, c_tgt, cfg), x0, bg);
    r.bg_mse_kvedit = mse(edit(field, x0, mask, c_src, c_tgt, cfg).image, x0, bg);
    return r;
}

} // namespace kvedit
