// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "kvedit/errors.hpp"
#include "kvedit/kv_cache.hpp"
#include "kvedit/partition.hpp"
#include "kvedit/rng.hpp"
#include "kvedit/tensor.hpp"

namespace kvedit {

struct ModelConfig {
    std::size_t image_size = 16;
    std::size_t channels = 3;
    std::size_t patch_size = 4;
    std::size_t token_dim = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t num_conditions = 8; ///< real classes; id == num_conditions is the null condition
    std::size_t mlp_ratio = 4;

    std::size_t grid_side() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid_side() * grid_side(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t head_dim() const { return token_dim / heads; }
    std::size_t mlp_dim() const { return token_dim * mlp_ratio; }
    std::size_t null_condition() const { return num_conditions; }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
            throw ConfigError("model: image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                              std::to_string(patch_size));
        if (heads == 0 || token_dim == 0 || token_dim % heads != 0)
            throw ConfigError("model: token_dim " + std::to_string(token_dim) + " is not divisible by heads " +
                              std::to_string(heads));
        if (token_dim % 2 != 0) throw ConfigError("model: token_dim must be even for the time embedding");
        if (channels == 0 || mlp_ratio == 0) throw ConfigError("model: channels and mlp_ratio must be positive");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Class label fed to the model. `null` is the reserved unconditional label.
struct ConditionId {
    std::size_t id = 0;

    static ConditionId null(const ModelConfig& cfg) { return {cfg.null_condition()}; }
    friend bool operator==(const ConditionId&, const ConditionId&) = default;
};

struct GuidanceConfig {
    double inversion = 1.5;
    double denoise = 5.5;

    void validate() const {
        if (!(inversion >= 0) || !(denoise >= 0)) throw ConfigError("guidance values must be >= 0");
    }
};

/// Patch tokens of an image (rows = tokens, cols = C*p*p) at flow time t.
/// `index` is empty for the full sequence; otherwise it lists, strictly
/// increasing, the original position of every row.
template <class T>
struct TokenState {
    Tensor<T> tokens;
    std::vector<std::size_t> index;
    double t = 0.0;

    std::size_t position(std::size_t row) const { return index.empty() ? row : index[row]; }
};

template <class T>
struct LayerWeights {
    Tensor<T> norm1, wq, wk, wv, wo, bo;
    Tensor<T> norm2, w1, b1, w2, b2;
    Tensor<T> wmod, bmod; ///< cvec -> [shift1 | scale1 | shift2 | scale2]
};

template <class T>
struct ModelWeights {
    ModelConfig config;
    Tensor<T> w_embed, b_embed, pos;
    Tensor<T> cond_table;
    Tensor<T> w_t1, b_t1, w_t2, b_t2;
    std::vector<LayerWeights<T>> layers;
    Tensor<T> norm_f, wmod_f, bmod_f; ///< cvec -> [shift | scale]
    Tensor<T> w_head, b_head;

    /// Visits every parameter tensor with a stable name, in a fixed order.
    template <class Self, class Fn>
    static void visit(Self& self, Fn&& fn) {
        fn("embed.w", self.w_embed);
        fn("embed.b", self.b_embed);
        fn("pos", self.pos);
        fn("cond_table", self.cond_table);
        fn("time.w1", self.w_t1);
        fn("time.b1", self.b_t1);
        fn("time.w2", self.w_t2);
        fn("time.b2", self.b_t2);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& L = self.layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            fn(p + "norm1", L.norm1);
            fn(p + "wq", L.wq);
            fn(p + "wk", L.wk);
            fn(p + "wv", L.wv);
            fn(p + "wo", L.wo);
            fn(p + "bo", L.bo);
            fn(p + "norm2", L.norm2);
            fn(p + "w1", L.w1);
            fn(p + "b1", L.b1);
            fn(p + "w2", L.w2);
            fn(p + "b2", L.b2);
            fn(p + "wmod", L.wmod);
            fn(p + "bmod", L.bmod);
        }
        fn("final.norm", self.norm_f);
        fn("final.wmod", self.wmod_f);
        fn("final.bmod", self.bmod_f);
        fn("head.w", self.w_head);
        fn("head.b", self.b_head);
    }

    template <class Fn>
    void for_each_param(Fn&& fn) {
        visit(*this, std::forward<Fn>(fn));
    }
    template <class Fn>
    void for_each_param(Fn&& fn) const {
        visit(*this, std::forward<Fn>(fn));
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_param([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
        return n;
    }

    bool all_finite() const {
        bool ok = true;
        for_each_param([&](const std::string&, const Tensor<T>& t) { ok = ok && t.all_finite(); });
        return ok;
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    ModelWeights zeros_like() const {
        ModelWeights z = *this;
        z.for_each_param([](const std::string&, Tensor<T>& t) { t.fill(T(0)); });
        return z;
    }

    template <class U>
    ModelWeights<U> cast() const {
        ModelWeights<U> out = ModelWeights<U>::shaped(config);
        auto src = flat_params();
        std::size_t off = 0;
        out.for_each_param([&](const std::string&, Tensor<U>& t) {
            for (auto& v : t.values()) v = static_cast<U>(src[off++]);
        });
        return out;
    }

    std::vector<T> flat_params() const {
        std::vector<T> out;
        out.reserve(parameter_count());
        for_each_param([&](const std::string&, const Tensor<T>& t) {
            out.insert(out.end(), t.values().begin(), t.values().end());
        });
        return out;
    }

    /// Zero-filled weights with the shapes implied by `cfg`.
    static ModelWeights shaped(const ModelConfig& cfg) {
        cfg.validate();
        const std::size_t d = cfg.token_dim, pd = cfg.patch_dim(), h = cfg.mlp_dim();
        ModelWeights w;
        w.config = cfg;
        w.w_embed = Tensor<T>({pd, d});
        w.b_embed = Tensor<T>({d});
        w.pos = Tensor<T>({cfg.tokens(), d});
        w.cond_table = Tensor<T>({cfg.num_conditions + 1, d});
        w.w_t1 = Tensor<T>({d, d});
        w.b_t1 = Tensor<T>({d});
        w.w_t2 = Tensor<T>({d, d});
        w.b_t2 = Tensor<T>({d});
        w.layers.resize(cfg.layers);
        for (auto& L : w.layers) {
            L.norm1 = Tensor<T>({d});
            L.wq = Tensor<T>({d, d});
            L.wk = Tensor<T>({d, d});
            L.wv = Tensor<T>({d, d});
            L.wo = Tensor<T>({d, d});
            L.bo = Tensor<T>({d});
            L.norm2 = Tensor<T>({d});
            L.w1 = Tensor<T>({d, h});
            L.b1 = Tensor<T>({h});
            L.w2 = Tensor<T>({h, d});
            L.b2 = Tensor<T>({d});
            L.wmod = Tensor<T>({d, 4 * d});
            L.bmod = Tensor<T>({4 * d});
        }
        w.norm_f = Tensor<T>({d});
        w.wmod_f = Tensor<T>({d, 2 * d});
        w.bmod_f = Tensor<T>({2 * d});
        w.w_head = Tensor<T>({d, pd});
        w.b_head = Tensor<T>({pd});
        return w;
    }
};

/// Scaled-normal initialization: matrices ~ N(0, 1/fan_in), norm gains 1,
/// biases 0. Modulation and head weights start small so the untrained
/// network is close to a plain transformer with a near-zero output.
template <class T>
ModelWeights<T> init_weights(const ModelConfig& cfg, Rng& rng) {
    ModelWeights<T> w = ModelWeights<T>::shaped(cfg);
    auto fill = [&](Tensor<T>& t, double stddev) {
        for (auto& v : t.values()) v = static_cast<T>(stddev * rng.normal());
    };
    auto fan_in = [](const Tensor<T>& t) { return 1.0 / std::sqrt(static_cast<double>(t.dim(0))); };
    fill(w.w_embed, fan_in(w.w_embed));
    fill(w.pos, 0.1);
    fill(w.cond_table, 1.0);
    fill(w.w_t1, fan_in(w.w_t1));
    fill(w.w_t2, fan_in(w.w_t2));
    for (auto& L : w.layers) {
        L.norm1.fill(T(1));
        L.norm2.fill(T(1));
        fill(L.wq, fan_in(L.wq));
        fill(L.wk, fan_in(L.wk));
        fill(L.wv, fan_in(L.wv));
        fill(L.wo, 0.5 * fan_in(L.wo));
        fill(L.w1, fan_in(L.w1));
        fill(L.w2, 0.5 * fan_in(L.w2));
        fill(L.wmod, 0.1 * fan_in(L.wmod));
    }
    w.norm_f.fill(T(1));
    fill(w.wmod_f, 0.1 * fan_in(w.wmod_f));
    fill(w.w_head, 0.1 * fan_in(w.w_head));
    return w;
}

// ---------------------------------------------------------------------------
// Patch layout

/// [C x H x W] image -> [P x C*p*p] tokens. Token k covers patch
/// (k / side, k % side); features run over (channel, dy, dx).
template <class T>
Tensor<T> patchify(const Tensor<T>& image, const ModelConfig& cfg) {
    const std::size_t C = cfg.channels, S = cfg.image_size, p = cfg.patch_size, side = cfg.grid_side();
    if (image.shape() != Shape{C, S, S})
        throw ShapeError("patchify: expected image " + shape_str({C, S, S}) + ", got " + shape_str(image.shape()));
    Tensor<T> out = Tensor<T>::matrix(cfg.tokens(), cfg.patch_dim());
    for (std::size_t py = 0; py < side; ++py)
        for (std::size_t px = 0; px < side; ++px) {
            T* row = out.row(py * side + px).data();
            std::size_t f = 0;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx)
                        row[f++] = image[(c * S + py * p + dy) * S + px * p + dx];
        }
    return out;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, const ModelConfig& cfg) {
    const std::size_t C = cfg.channels, S = cfg.image_size, p = cfg.patch_size, side = cfg.grid_side();
    if (tokens.shape() != Shape{cfg.tokens(), cfg.patch_dim()})
        throw ShapeError("unpatchify: expected full token sequence " + shape_str({cfg.tokens(), cfg.patch_dim()}) +
                         ", got " + shape_str(tokens.shape()));
    Tensor<T> image({C, S, S});
    for (std::size_t py = 0; py < side; ++py)
        for (std::size_t px = 0; px < side; ++px) {
            const T* row = tokens.row(py * side + px).data();
            std::size_t f = 0;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx)
                        image[(c * S + py * p + dy) * S + px * p + dx] = row[f++];
        }
    return image;
}

namespace detail {

template <class T>
Tensor<T> embed_rows(const Tensor<T>& patches, std::span<const std::size_t> positions, const ModelWeights<T>& w) {
    Tensor<T> h = matmul(patches, w.w_embed);
    for (std::size_t r = 0; r < h.rows(); ++r) {
        auto row = h.row(r);
        auto pe = w.pos.row(positions[r]);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += w.b_embed[c] + pe[c];
    }
    return h;
}

inline std::vector<std::size_t> iota_positions(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

} // namespace detail

/// Image -> embedded tokens [P x d] (patch projection plus positional
/// embedding): the model's input stage.
template <class T>
Tensor<T> tokenize(const Tensor<T>& image, const ModelWeights<T>& w) {
    const auto pos = detail::iota_positions(w.config.tokens());
    return detail::embed_rows(patchify(image, w.config), pos, w);
}

/// Hidden tokens [P x d] -> image through the output projection: the
/// model's last stage. Foreground-only subsequences are rejected.
template <class T>
Tensor<T> detokenize(const Tensor<T>& hidden, const ModelWeights<T>& w) {
    if (hidden.rank() != 2 || hidden.rows() != w.config.tokens())
        throw ShapeError("detokenize: expected " + std::to_string(w.config.tokens()) + " token rows, got " +
                         shape_str(hidden.shape()) + "; composite foreground rows first");
    Tensor<T> out = matmul(hidden, w.w_head);
    add_row_bias(out, w.b_head);
    return unpatchify(out, w.config);
}

// ---------------------------------------------------------------------------
// Attention modes

enum class AttentionMode {
    Plain,        ///< full self-attention
    Record,       ///< full self-attention; return background K/V per layer
    RecordMasked, ///< as Record, background queries blocked from foreground keys
    Inject        ///< foreground queries over cached background K/V + fresh foreground K/V
};

template <class T>
struct KvMode {
    AttentionMode mode = AttentionMode::Plain;
    const TokenPartition* partition = nullptr;  ///< Record, RecordMasked
    std::vector<const KVEntry<T>*> cache;       ///< Inject: one entry per layer
    double attention_scale = 1.0;               ///< Inject: multiplier on fg-query/bg-key logits

    static KvMode plain() { return {}; }
    static KvMode record(const TokenPartition& p) { return {AttentionMode::Record, &p, {}, 1.0}; }
    static KvMode record_masked(const TokenPartition& p) { return {AttentionMode::RecordMasked, &p, {}, 1.0}; }
    static KvMode inject(std::vector<const KVEntry<T>*> slice, double scale = 1.0) {
        return {AttentionMode::Inject, nullptr, std::move(slice), scale};
    }

    bool records() const { return mode == AttentionMode::Record || mode == AttentionMode::RecordMasked; }
};

template <class T>
struct VelocityOutput {
    Tensor<T> velocity;
    std::vector<KVEntry<T>> kv; ///< Record modes: one entry per layer (layer index 1-based, timestep unset)
};

/// Sets logits of background queries on foreground keys to -inf.
/// `query_fg` / `key_fg` flag each row / column of `logits`.
template <class T>
void apply_inversion_attention_mask(Tensor<T>& logits, const std::vector<char>& query_fg,
                                    const std::vector<char>& key_fg) {
    if (logits.rows() != query_fg.size() || logits.cols() != key_fg.size())
        throw ShapeError("inversion mask: flags do not match logits " + shape_str(logits.shape()));
    for (std::size_t q = 0; q < logits.rows(); ++q) {
        if (query_fg[q]) continue;
        for (std::size_t k = 0; k < logits.cols(); ++k)
            if (key_fg[k]) logits.at(q, k) = -std::numeric_limits<T>::infinity();
    }
}

/// Multiplies logits of foreground queries on background keys by `s`.
template <class T>
void apply_attention_scale(Tensor<T>& logits, const std::vector<char>& query_fg, const std::vector<char>& key_fg,
                           T s) {
    if (!(s >= T(1))) throw ConfigError("attention scale must be >= 1");
    if (logits.rows() != query_fg.size() || logits.cols() != key_fg.size())
        throw ShapeError("attention scale: flags do not match logits " + shape_str(logits.shape()));
    if (s == T(1)) return;
    for (std::size_t q = 0; q < logits.rows(); ++q) {
        if (!query_fg[q]) continue;
        for (std::size_t k = 0; k < logits.cols(); ++k)
            if (!key_fg[k]) logits.at(q, k) *= s;
    }
}

namespace detail {

struct LogitHook {
    enum class Kind { None, MaskBgToFg, ScaleFgToBg } kind = Kind::None;
    std::vector<char> query_fg;
    std::vector<char> key_fg;
    double scale = 1.0;
};

/// Multi-head attention of queries Q [F x d] over keys/values [P x d].
/// Heads occupy contiguous column blocks. When `probs` is non-null the
/// per-head softmax outputs are stored there (heads x [F x P]).
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, std::size_t heads,
                               const LogitHook& hook, std::vector<Tensor<T>>* probs = nullptr) {
    const std::size_t F = Q.rows(), P = K.rows(), d = Q.cols(), dh = d / heads;
    const T alpha = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> out = Tensor<T>::matrix(F, d);
    if (probs) probs->assign(heads, Tensor<T>::matrix(F, P));
    Tensor<T> logits = Tensor<T>::matrix(F, P);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t q = 0; q < F; ++q) {
            const T* qr = Q.row(q).data() + c0;
            for (std::size_t k = 0; k < P; ++k) {
                const T* kr = K.row(k).data() + c0;
                T s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
                logits.at(q, k) = s * alpha;
            }
        }
        if (hook.kind == LogitHook::Kind::MaskBgToFg)
            apply_inversion_attention_mask(logits, hook.query_fg, hook.key_fg);
        else if (hook.kind == LogitHook::Kind::ScaleFgToBg)
            apply_attention_scale(logits, hook.query_fg, hook.key_fg, static_cast<T>(hook.scale));
        for (std::size_t q = 0; q < F; ++q) {
            auto row = logits.row(q);
            softmax_inplace(row);
            T* orow = out.row(q).data() + c0;
            for (std::size_t k = 0; k < P; ++k) {
                const T a = row[k];
                const T* vr = V.row(k).data() + c0;
                for (std::size_t c = 0; c < dh; ++c) orow[c] += a * vr[c];
            }
        }
        if (probs) (*probs)[h] = logits;
    }
    return out;
}

template <class T>
T rms_inv(std::span<const T> x) {
    T ms = 0;
    for (T v : x) ms += v * v;
    ms /= T(x.size());
    return T(1) / std::sqrt(ms + T(kRmsEps));
}

/// y = rmsnorm(x) * gain * (1 + scale) + shift, row by row. Optionally
/// returns the normalized rows (before gain) and the per-row 1/rms.
template <class T>
Tensor<T> norm_modulate(const Tensor<T>& x, const Tensor<T>& gain, const T* shift, const T* scale,
                        Tensor<T>* nhat = nullptr, std::vector<T>* inv = nullptr) {
    const std::size_t n = x.rows(), d = x.cols();
    Tensor<T> y = Tensor<T>::matrix(n, d);
    if (nhat) *nhat = Tensor<T>::matrix(n, d);
    if (inv) inv->assign(n, T(0));
    for (std::size_t r = 0; r < n; ++r) {
        auto xr = x.row(r);
        const T s = rms_inv<T>(xr);
        if (inv) (*inv)[r] = s;
        T* yr = y.row(r).data();
        for (std::size_t c = 0; c < d; ++c) {
            const T nh = xr[c] * s;
            if (nhat) nhat->at(r, c) = nh;
            yr[c] = nh * gain[c] * (T(1) + scale[c]) + shift[c];
        }
    }
    return y;
}

} // namespace detail

/// Sinusoidal embedding of t in [0, 1]: cos block then sin block.
template <class T>
Tensor<T> time_embedding(double t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Tensor<T> e({dim});
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        const double arg = 1000.0 * t * freq;
        e[k] = static_cast<T>(std::cos(arg));
        e[half + k] = static_cast<T>(std::sin(arg));
    }
    return e;
}

/// Intermediate values kept by a plain forward pass for backpropagation.
template <class T>
struct Activations {
    struct Layer {
        Tensor<T> h_in, nhat1, a, q, k, v, attn, h_mid, nhat2, b, m1, m2;
        std::vector<T> inv1, inv2;
        std::vector<Tensor<T>> probs;
    };
    Tensor<T> patches, s, u1, u2, temb, e, cvec;
    std::vector<Tensor<T>> mods;
    std::vector<Layer> layers;
    Tensor<T> h_final, nhat_f, f, mod_f;
    std::vector<T> inv_f;
};

/// Velocity prediction of the DiT for `state` under condition `c`.
///
/// In Record modes the returned `kv` holds, for each layer, the K/V rows of
/// the partition's background positions. In Inject mode `state` may be a
/// foreground subsequence; `kv.cache` supplies each layer's background rows
/// and the two sets must tile 0..P-1 exactly.
template <class T>
VelocityOutput<T> forward_velocity(const TokenState<T>& state, ConditionId c, const ModelWeights<T>& w,
                                   const KvMode<T>& kv = KvMode<T>::plain(), Activations<T>* acts = nullptr) {
    const ModelConfig& cfg = w.config;
    const std::size_t P = cfg.tokens(), d = cfg.token_dim, M = cfg.layers;
    const Tensor<T>& X = state.tokens;
    if (X.rank() != 2 || X.cols() != cfg.patch_dim())
        throw ShapeError("forward: token rows must have width " + std::to_string(cfg.patch_dim()) + ", got " +
                         shape_str(X.shape()));
    if (c.id > cfg.num_conditions) throw ShapeError("forward: condition id " + std::to_string(c.id) + " out of range");
    if (!(state.t >= 0.0 && state.t <= 1.0)) throw ShapeError("forward: time " + std::to_string(state.t) + " outside [0,1]");
    const std::size_t F = X.rows();

    std::vector<std::size_t> positions = state.index.empty() ? detail::iota_positions(F) : state.index;
    if (positions.size() != F) throw ShapeError("forward: index list length differs from token rows");
    for (std::size_t r = 0; r < F; ++r)
        if (positions[r] >= P || (r && positions[r] <= positions[r - 1]))
            throw ShapeError("forward: token index list must be strictly increasing and below " + std::to_string(P));

    const bool inject = kv.mode == AttentionMode::Inject;
    if (!inject && F != P)
        throw ShapeError("forward: full sequence of " + std::to_string(P) + " tokens required outside inject mode");
    if (kv.records()) {
        if (!kv.partition) throw ShapeError("forward: record mode without a partition");
        kv.partition->validate(P);
    }
    std::vector<char> key_is_fresh(P, 0);
    for (std::size_t p : positions) key_is_fresh[p] = 1;
    if (inject) {
        if (kv.cache.size() != M)
            throw CacheError("forward: inject needs " + std::to_string(M) + " cached layers, got " +
                             std::to_string(kv.cache.size()));
        for (const KVEntry<T>* e : kv.cache) {
            if (!e) throw CacheError("forward: null cache entry");
            if (e->k.cols() != d || e->k.rows() != e->bg_positions.size() || e->v.shape() != e->k.shape())
                throw ShapeError("forward: cached K/V shape " + shape_str(e->k.shape()) + " does not fit width " +
                                 std::to_string(d));
            std::vector<char> covered = key_is_fresh;
            for (std::size_t p : e->bg_positions) {
                if (p >= P) throw ShapeError("forward: cached position " + std::to_string(p) + " out of range");
                if (covered[p])
                    throw ShapeError("forward: cached background position " + std::to_string(p) +
                                     " overlaps a foreground row");
                covered[p] = 1;
            }
            for (std::size_t p = 0; p < P; ++p)
                if (!covered[p])
                    throw ShapeError("forward: key/value assembly has a gap at position " + std::to_string(p));
        }
    }
    if (acts && kv.mode != AttentionMode::Plain)
        throw ShapeError("forward: activations are only captured in plain mode");
    if (!(kv.attention_scale >= 1.0)) throw ConfigError("attention scale must be >= 1");

    // Conditioning vector shared by all tokens.
    Tensor<T> s = time_embedding<T>(state.t, d);
    Tensor<T> u1 = matmul(s.reshaped({1, d}), w.w_t1);
    add_row_bias(u1, w.b_t1);
    Tensor<T> u2 = u1;
    for (auto& v : u2.values()) v = silu(v);
    Tensor<T> temb = matmul(u2, w.w_t2);
    add_row_bias(temb, w.b_t2);
    Tensor<T> e = temb;
    for (std::size_t i = 0; i < d; ++i) e[i] += w.cond_table.at(c.id, i);
    Tensor<T> cvec = e;
    for (auto& v : cvec.values()) v = silu(v);

    if (acts) {
        acts->patches = X;
        acts->s = s;
        acts->u1 = u1;
        acts->u2 = u2;
        acts->temb = temb;
        acts->e = e;
        acts->cvec = cvec;
        acts->mods.clear();
        acts->layers.assign(M, {});
    }

    Tensor<T> h = detail::embed_rows(X, positions, w);

    detail::LogitHook hook;
    if (kv.mode == AttentionMode::RecordMasked) {
        hook.kind = detail::LogitHook::Kind::MaskBgToFg;
        hook.query_fg = kv.partition->fg_flags();
        hook.key_fg = hook.query_fg;
    } else if (inject && kv.attention_scale != 1.0) {
        hook.kind = detail::LogitHook::Kind::ScaleFgToBg;
        hook.query_fg.assign(F, 1);
        hook.key_fg = key_is_fresh;
        hook.scale = kv.attention_scale;
    }

    VelocityOutput<T> result;
    for (std::size_t l = 0; l < M; ++l) {
        const LayerWeights<T>& L = w.layers[l];
        Tensor<T> mod = matmul(cvec, L.wmod);
        add_row_bias(mod, L.bmod);
        const T* shift1 = mod.data();
        const T* scale1 = mod.data() + d;
        const T* shift2 = mod.data() + 2 * d;
        const T* scale2 = mod.data() + 3 * d;

        typename Activations<T>::Layer* la = acts ? &acts->layers[l] : nullptr;
        if (la) la->h_in = h;

        Tensor<T> a = detail::norm_modulate(h, L.norm1, shift1, scale1, la ? &la->nhat1 : nullptr,
                                            la ? &la->inv1 : nullptr);
        Tensor<T> q = matmul(a, L.wq);
        Tensor<T> k = matmul(a, L.wk);
        Tensor<T> v = matmul(a, L.wv);

        Tensor<T> attn;
        if (inject) {
            const KVEntry<T>& entry = *kv.cache[l];
            Tensor<T> k_full = Tensor<T>::matrix(P, d);
            Tensor<T> v_full = Tensor<T>::matrix(P, d);
            scatter_rows(entry.k, std::span<const std::size_t>(entry.bg_positions), k_full);
            scatter_rows(entry.v, std::span<const std::size_t>(entry.bg_positions), v_full);
            scatter_rows(k, std::span<const std::size_t>(positions), k_full);
            scatter_rows(v, std::span<const std::size_t>(positions), v_full);
            attn = detail::multi_head_attention(q, k_full, v_full, cfg.heads, hook);
        } else {
            if (kv.records()) {
                KVEntry<T> rec;
                rec.layer = l + 1;
                rec.bg_positions = kv.partition->bg;
                rec.k = gather_rows(k, std::span<const std::size_t>(rec.bg_positions));
                rec.v = gather_rows(v, std::span<const std::size_t>(rec.bg_positions));
                result.kv.push_back(std::move(rec));
            }
            attn = detail::multi_head_attention(q, k, v, cfg.heads, hook, la ? &la->probs : nullptr);
        }

        Tensor<T> proj = matmul(attn, L.wo);
        add_row_bias(proj, L.bo);
        h = add(h, proj);
        if (la) {
            la->a = std::move(a);
            la->q = std::move(q);
            la->k = std::move(k);
            la->v = std::move(v);
            la->attn = std::move(attn);
            la->h_mid = h;
        }

        Tensor<T> b = detail::norm_modulate(h, L.norm2, shift2, scale2, la ? &la->nhat2 : nullptr,
                                            la ? &la->inv2 : nullptr);
        Tensor<T> m1 = matmul(b, L.w1);
        add_row_bias(m1, L.b1);
        Tensor<T> m2 = m1;
        for (auto& x : m2.values()) x = silu(x);
        Tensor<T> m3 = matmul(m2, L.w2);
        add_row_bias(m3, L.b2);
        h = add(h, m3);
        if (la) {
            la->b = std::move(b);
            la->m1 = std::move(m1);
            la->m2 = std::move(m2);
        }
        if (acts) acts->mods.push_back(std::move(mod));
    }

    Tensor<T> mod_f = matmul(cvec, w.wmod_f);
    add_row_bias(mod_f, w.bmod_f);
    Tensor<T> f = detail::norm_modulate(h, w.norm_f, mod_f.data(), mod_f.data() + d, acts ? &acts->nhat_f : nullptr,
                                        acts ? &acts->inv_f : nullptr);
    Tensor<T> out = matmul(f, w.w_head);
    add_row_bias(out, w.b_head);
    if (acts) {
        acts->h_final = std::move(h);
        acts->f = std::move(f);
        acts->mod_f = std::move(mod_f);
    }
    if (!out.all_finite()) throw NumericError("forward: non-finite velocity");
    result.velocity = std::move(out);
    return result;
}

/// Classifier-free guidance: v = v_null + g * (v_c - v_null). g = 1 and
/// g = 0 return the single relevant pass unchanged. Record modes take K/V
/// from the conditional pass.
template <class T>
VelocityOutput<T> guided_velocity(const TokenState<T>& state, ConditionId c, const ModelWeights<T>& w, double g,
                                  const KvMode<T>& kv = KvMode<T>::plain()) {
    if (!(g >= 0.0)) throw ConfigError("guidance must be >= 0, got " + std::to_string(g));
    const ConditionId null_c = ConditionId::null(w.config);
    if (g == 1.0 || c == null_c) return forward_velocity(state, c, w, kv);
    VelocityOutput<T> cond = forward_velocity(state, c, w, kv);
    // The null pass sees the same attention pattern but does not feed the cache.
    KvMode<T> uncond_mode = kv;
    if (kv.mode == AttentionMode::Record) uncond_mode = KvMode<T>::plain();
    VelocityOutput<T> uncond = forward_velocity(state, null_c, w, uncond_mode);
    if (g == 0.0) {
        cond.velocity = std::move(uncond.velocity);
        return cond;
    }
    const T gg = static_cast<T>(g);
    Tensor<T>& v = cond.velocity;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = uncond.velocity[i] + gg * (v[i] - uncond.velocity[i]);
    return cond;
}

/// A velocity field over token states: the trained DiT, or a stub.
template <class F, class T>
concept VelocityField = requires(const F& f, const TokenState<T>& s, ConditionId c, double g, const KvMode<T>& kv) {
    { f.velocity(s, c, g, kv) } -> std::same_as<VelocityOutput<T>>;
    { f.num_layers() } -> std::convertible_to<std::size_t>;
    { f.config() } -> std::convertible_to<const ModelConfig&>;
};

template <class T>
class DiTField {
public:
    explicit DiTField(const ModelWeights<T>& w) : w_(&w) {}
    VelocityOutput<T> velocity(const TokenState<T>& s, ConditionId c, double g, const KvMode<T>& kv) const {
        return guided_velocity(s, c, *w_, g, kv);
    }
    std::size_t num_layers() const { return w_->config.layers; }
    const ModelConfig& config() const { return w_->config; }
    const ModelWeights<T>& weights() const { return *w_; }

private:
    const ModelWeights<T>* w_;
};

} // namespace kvedit
