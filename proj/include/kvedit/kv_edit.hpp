// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kvedit/errors.hpp"
#include "kvedit/flow.hpp"
#include "kvedit/kv_cache.hpp"
#include "kvedit/mask.hpp"
#include "kvedit/model.hpp"
#include "kvedit/partition.hpp"
#include "kvedit/rng.hpp"

namespace kvedit {

struct EditConfig {
    std::size_t steps = 28;
    std::size_t skip = 4;
    GuidanceConfig guidance;
    bool reinit = false;
    bool inversion_attention_mask = false;
    double attention_scale = 1.0;
    std::uint64_t seed = 0;

    TimeGrid grid() const { return make_time_grid(steps, skip); }

    void validate() const {
        guidance.validate();
        if (!(attention_scale >= 1.0)) throw ConfigError("attention_scale must be >= 1");
        (void)grid();
    }
};

/// Token k is foreground when any pixel of its patch is set.
inline TokenPartition partition_tokens(const PixelMask& mask, const ModelConfig& cfg) {
    mask.require_size(cfg.image_size, cfg.image_size, "partition_tokens");
    const std::size_t side = cfg.grid_side(), p = cfg.patch_size;
    std::vector<char> fg(cfg.tokens(), 0);
    for (std::size_t y = 0; y < cfg.image_size; ++y)
        for (std::size_t x = 0; x < cfg.image_size; ++x)
            if (mask.at(y, x)) fg[(y / p) * side + x / p] = 1;
    return TokenPartition::from_flags(fg);
}

/// Places foreground rows and background rows at their original positions.
/// The two position lists must tile 0..P-1 exactly.
template <class T>
Tensor<T> assemble_rows(std::size_t num_tokens, std::span<const std::size_t> fg_positions, const Tensor<T>& fg_rows,
                        std::span<const std::size_t> bg_positions, const Tensor<T>& bg_rows) {
    if (fg_rows.rows() != fg_positions.size() || bg_rows.rows() != bg_positions.size() ||
        fg_rows.cols() != bg_rows.cols())
        throw ShapeError("assemble_rows: row counts do not match position lists");
    std::vector<char> seen(num_tokens, 0);
    for (auto list : {fg_positions, bg_positions})
        for (std::size_t p : list) {
            if (p >= num_tokens || seen[p])
                throw ShapeError("assemble_rows: position " + std::to_string(p) + " out of range or repeated");
            seen[p] = 1;
        }
    for (std::size_t p = 0; p < num_tokens; ++p)
        if (!seen[p]) throw ShapeError("assemble_rows: no row for position " + std::to_string(p));
    Tensor<T> out = Tensor<T>::matrix(num_tokens, fg_rows.cols());
    scatter_rows(fg_rows, fg_positions, out);
    scatter_rows(bg_rows, bg_positions, out);
    return out;
}

/// Single-head attention of foreground queries over the full, order-
/// preserving key/value sequence: softmax(Q K^T / sqrt(d)) V.
template <class T>
Tensor<T> decoupled_attention(const Tensor<T>& q_fg, const Tensor<T>& k_full, const Tensor<T>& v_full) {
    if (q_fg.cols() != k_full.cols() || k_full.shape() != v_full.shape())
        throw ShapeError("decoupled_attention: Q " + shape_str(q_fg.shape()) + ", K " + shape_str(k_full.shape()) +
                         ", V " + shape_str(v_full.shape()));
    return detail::multi_head_attention(q_fg, k_full, v_full, 1, detail::LogitHook{});
}

/// Everything an inversion leaves behind; enough to run any number of
/// foreground edits without inverting again.
template <class T>
struct InversionResult {
    Tensor<T> source;     ///< x_0 image [C x H x W]
    PixelMask mask;
    TokenPartition partition;
    TokenState<T> top;    ///< full token state at the top grid node
    KVCache<T> cache{CacheMode::Retain};
    TimeGrid grid;
    ConditionId source_condition;
};

/// Inversion that caches every layer's background K/V at every step.
template <class T, VelocityField<T> Field>
InversionResult<T> invert_with_cache(const Field& field, const Tensor<T>& x0, const PixelMask& mask, ConditionId c_src,
                                     const EditConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = field.config();
    InversionResult<T> res;
    res.source = x0;
    res.mask = mask;
    res.partition = partition_tokens(mask, mc);
    res.grid = cfg.grid();
    res.source_condition = c_src;
    const KvMode<T> mode = cfg.inversion_attention_mask ? KvMode<T>::record_masked(res.partition)
                                                        : KvMode<T>::record(res.partition);
    TokenState<T> x{patchify(x0, mc), {}, res.grid.t[0]};
    for (std::size_t i = 1; i <= res.grid.steps(); ++i) {
        StepResult<T> step = invert_step(field, x, res.grid, i, c_src, cfg.guidance.inversion, mode);
        for (auto& e : step.kv) res.cache.append(std::move(e));
        x = std::move(step.state);
    }
    res.top = std::move(x);
    return res;
}

/// z' = noise * t_N + z * (1 - t_N), elementwise.
template <class T>
Tensor<T> fuse_noise(const Tensor<T>& z, const Tensor<T>& noise, double t_top) {
    if (z.shape() != noise.shape()) throw ShapeError("reinitialize: noise shape differs from state");
    const T a = static_cast<T>(t_top), b = static_cast<T>(1.0 - t_top);
    Tensor<T> out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = noise[i] * a + z[i] * b;
    return out;
}

/// Blends the state's rows with fresh Gaussian noise drawn from `rng`.
template <class T>
TokenState<T> reinitialize(const TokenState<T>& z, double t_top, Rng& rng) {
    if (!(t_top >= 0.0 && t_top <= 1.0)) throw ConfigError("reinitialize: t_N must be in [0,1]");
    const Tensor<T> noise = sample_gaussian<T>(rng, z.tokens.shape());
    return {fuse_noise(z.tokens, noise, t_top), z.index, z.t};
}

struct EditLogEntry {
    std::size_t step = 0;
    double t = 0;
    std::size_t fg_count = 0;
    std::size_t cache_hits = 0;
    std::size_t peak_floats = 0; ///< inversion-free runs only
};

/// Denoises foreground rows only, attending over the cached background K/V
/// of each (step, layer). Steps run i = N..1; layers are fetched in order.
template <class T, VelocityField<T> Field>
TokenState<T> denoise_foreground(const Field& field, TokenState<T> z_fg, const KVCache<T>& cache, ConditionId c_tgt,
                                 const TimeGrid& grid, double guidance, double attention_scale = 1.0,
                                 std::vector<EditLogEntry>* log = nullptr) {
    const std::size_t M = field.num_layers();
    if (z_fg.index.empty() && z_fg.tokens.rows() != field.config().tokens())
        throw ShapeError("denoise_foreground: foreground state needs an index list");
    for (std::size_t i = grid.steps(); i >= 1; --i) {
        std::vector<const KVEntry<T>*> slice;
        slice.reserve(M);
        for (std::size_t j = 1; j <= M; ++j) slice.push_back(&cache.get(i, j));
        const double t_i = z_fg.t;
        z_fg = denoise_step(field, z_fg, grid, i, c_tgt, guidance, KvMode<T>::inject(std::move(slice), attention_scale))
                   .state;
        if (log) log->push_back({grid.steps() - i + 1, t_i, z_fg.tokens.rows(), M, 0});
    }
    return z_fg;
}

/// Pixel-level selection: `generated` where mask = 1, `source` elsewhere.
template <class T>
Tensor<T> composite(const Tensor<T>& generated, const Tensor<T>& source, const PixelMask& mask) {
    if (generated.shape() != source.shape() || source.rank() != 3)
        throw ShapeError("composite: image shapes " + shape_str(generated.shape()) + " and " +
                         shape_str(source.shape()));
    const std::size_t C = source.dim(0), H = source.dim(1), W = source.dim(2);
    mask.require_size(H, W, "composite");
    Tensor<T> out = source;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                if (mask.at(y, x)) out[(c * H + y) * W + x] = generated[(c * H + y) * W + x];
    return out;
}

/// Writes foreground token rows over the source image's tokens, converts
/// back to pixels and composites with the source.
template <class T>
Tensor<T> render_foreground(const TokenState<T>& z_fg, const Tensor<T>& source, const PixelMask& mask,
                            const ModelConfig& cfg) {
    Tensor<T> tokens = patchify(source, cfg);
    scatter_rows(z_fg.tokens, std::span<const std::size_t>(z_fg.index), tokens);
    return composite(unpatchify(tokens, cfg), source, mask);
}

template <class T>
struct EditResult {
    Tensor<T> image;
    std::vector<EditLogEntry> log;
    std::size_t peak_floats = 0;
};

/// Runs the denoising half of an edit from a stored inversion.
template <class T, VelocityField<T> Field>
EditResult<T> edit_from_inversion(const Field& field, const InversionResult<T>& inv, ConditionId c_tgt,
                                  const EditConfig& cfg) {
    cfg.validate();
    EditResult<T> res;
    if (inv.partition.fg.empty()) {
        res.image = inv.source;
        return res;
    }
    const std::vector<std::size_t>& fg = inv.partition.fg;
    TokenState<T> z{gather_rows(inv.top.tokens, std::span<const std::size_t>(fg)), fg, inv.top.t};
    if (cfg.reinit) {
        Rng rng = Rng(cfg.seed).fork(0x4e1ULL);
        z = reinitialize(z, inv.grid.top(), rng);
    }
    z = denoise_foreground(field, std::move(z), inv.cache, c_tgt, inv.grid, cfg.guidance.denoise, cfg.attention_scale,
                           &res.log);
    res.image = render_foreground(z, inv.source, inv.mask, field.config());
    res.peak_floats = inv.cache.meter().peak_floats();
    return res;
}

/// Background-preserving edit: invert with background K/V caching, then
/// regenerate only the foreground under `c_tgt`.
template <class T, VelocityField<T> Field>
EditResult<T> edit(const Field& field, const Tensor<T>& x0, const PixelMask& mask, ConditionId c_src,
                   ConditionId c_tgt, const EditConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = field.config();
    mask.require_size(mc.image_size, mc.image_size, "edit");
    if (x0.shape() != Shape{mc.channels, mc.image_size, mc.image_size})
        throw ShapeError("edit: image shape " + shape_str(x0.shape()) + " does not match the model");
    if (mask.empty_region()) return {x0, {}, 0};
    const InversionResult<T> inv = invert_with_cache(field, x0, mask, c_src, cfg);
    return edit_from_inversion(field, inv, c_tgt, cfg);
}

/// Plain inversion with `c_src` followed by full-image denoising with
/// `c_tgt`; every token is regenerated.
template <class T, VelocityField<T> Field>
Tensor<T> vanilla_edit(const Field& field, const Tensor<T>& x0, ConditionId c_src, ConditionId c_tgt,
                       const EditConfig& cfg) {
    const ModelConfig& mc = field.config();
    const TimeGrid grid = cfg.grid();
    const Trajectory<T> inv = invert(field, patchify(x0, mc), c_src, grid, cfg.guidance.inversion);
    const TokenState<T> z = denoise(field, inv.final_state(), c_tgt, grid, cfg.guidance.denoise);
    return unpatchify(z.tokens, mc);
}

} // namespace kvedit
