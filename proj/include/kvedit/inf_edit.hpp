// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "kvedit/kv_edit.hpp"

namespace kvedit {

/// Intermediate quantities of one inversion-free step, kept for tests.
template <class T>
struct InfStepRecord {
    std::size_t timestep = 0;
    double t = 0;
    Tensor<T> noise;     ///< full sequence
    Tensor<T> x_src;     ///< (1 - t) x0 + t * noise
    Tensor<T> v_src;     ///< full-sequence source velocity
    Tensor<T> z_tilde;   ///< foreground rows
    Tensor<T> v_tgt;     ///< foreground rows
    Tensor<T> delta;     ///< v_tgt - v_src on foreground rows
};

/// (1 - t) x0 + t noise, elementwise.
template <class T>
Tensor<T> noised_source(const Tensor<T>& x0, const Tensor<T>& noise, double t) {
    if (x0.shape() != noise.shape()) throw ShapeError("noised_source: noise shape differs from source");
    const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
    Tensor<T> out(x0.shape());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = a * x0[k] + b * noise[k];
    return out;
}

/// z + (x_src - x0) on the foreground rows.
template <class T>
Tensor<T> shifted_foreground(const Tensor<T>& z_fg, const Tensor<T>& x_src, const Tensor<T>& x0,
                             std::span<const std::size_t> fg) {
    return add(z_fg, sub(gather_rows(x_src, fg), gather_rows(x0, fg)));
}

/// One step of the inversion-free edit at node i. `cache` must be a Stream
/// cache and is empty again on return. Returns the updated foreground state.
template <class T, VelocityField<T> Field>
TokenState<T> inf_edit_step(const Field& field, const Tensor<T>& x0_tokens, const TokenState<T>& z_fg,
                            const TokenPartition& part, const TimeGrid& grid, std::size_t i, ConditionId c_src,
                            ConditionId c_tgt, const EditConfig& cfg, Rng& rng, KVCache<T>& cache,
                            InfStepRecord<T>* rec = nullptr) {
    if (cache.mode() != CacheMode::Stream) throw CacheError("inf_edit_step: cache must be in stream mode");
    if (!cache.empty()) throw CacheError("inf_edit_step: cache holds entries from an earlier step");
    if (i < 1 || i > grid.steps()) throw ShapeError("inf_edit_step: step index out of range");
    if (z_fg.index != part.fg) throw ShapeError("inf_edit_step: foreground state does not match the partition");
    const double t = grid.t[i];
    const Tensor<T> noise = sample_gaussian<T>(rng, x0_tokens.shape());
    const Tensor<T> x_src = noised_source(x0_tokens, noise, t);

    const KvMode<T> record = cfg.inversion_attention_mask ? KvMode<T>::record_masked(part) : KvMode<T>::record(part);
    VelocityOutput<T> src = field.velocity(TokenState<T>{x_src, {}, t}, c_src, cfg.guidance.inversion, record);
    for (auto& e : src.kv) {
        e.timestep = i;
        cache.append(std::move(e));
    }

    const std::span<const std::size_t> fg(part.fg);
    Tensor<T> z_tilde = shifted_foreground(z_fg.tokens, x_src, x0_tokens, fg);
    std::vector<const KVEntry<T>*> slice;
    for (std::size_t j = 1; j <= field.num_layers(); ++j) slice.push_back(&cache.get(i, j));
    VelocityOutput<T> tgt = field.velocity(TokenState<T>{z_tilde, part.fg, t}, c_tgt, cfg.guidance.denoise,
                                           KvMode<T>::inject(std::move(slice), cfg.attention_scale));
    Tensor<T> delta = sub(tgt.velocity, gather_rows(src.velocity, fg));
    cache.release_timestep(i);

    TokenState<T> next{euler_update(z_fg.tokens, delta, grid.t[i - 1] - t), z_fg.index, z_fg.t};
    if (rec) *rec = {i, t, noise, x_src, std::move(src.velocity), std::move(z_tilde), std::move(tgt.velocity), delta};
    return next;
}

/// Edit without an inversion pass: at every node the source is re-noised
/// directly, background K/V are cached for that node only, and the
/// foreground follows the difference of target and source velocities.
template <class T, VelocityField<T> Field>
EditResult<T> inf_edit(const Field& field, const Tensor<T>& x0, const PixelMask& mask, ConditionId c_src,
                       ConditionId c_tgt, const EditConfig& cfg, std::vector<InfStepRecord<T>>* records = nullptr) {
    cfg.validate();
    if (cfg.reinit) throw ConfigError("inf_edit: reinit is not available without an inverted state");
    const ModelConfig& mc = field.config();
    mask.require_size(mc.image_size, mc.image_size, "inf_edit");
    if (x0.shape() != Shape{mc.channels, mc.image_size, mc.image_size})
        throw ShapeError("inf_edit: image shape " + shape_str(x0.shape()) + " does not match the model");
    if (mask.empty_region()) return {x0, {}, 0};

    const TokenPartition part = partition_tokens(mask, mc);
    const TimeGrid grid = cfg.grid();
    const Tensor<T> x0_tokens = patchify(x0, mc);
    TokenState<T> z{gather_rows(x0_tokens, std::span<const std::size_t>(part.fg)), part.fg, 0.0};
    KVCache<T> cache(CacheMode::Stream);
    Rng rng = Rng(cfg.seed).fork(0x1f0ULL);
    EditResult<T> res;
    for (std::size_t i = grid.steps(); i >= 1; --i) {
        InfStepRecord<T> rec;
        z = inf_edit_step(field, x0_tokens, z, part, grid, i, c_src, c_tgt, cfg, rng, cache, records ? &rec : nullptr);
        if (records) records->push_back(std::move(rec));
        res.log.push_back({grid.steps() - i + 1, grid.t[i], part.fg.size(), field.num_layers(),
                           cache.meter().peak_floats()});
    }
    res.image = render_foreground(z, x0, mask, mc);
    res.peak_floats = cache.meter().peak_floats();
    return res;
}

} // namespace kvedit
