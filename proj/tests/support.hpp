// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "kvedit/kvedit.hpp"

namespace kvtest {

using namespace kvedit;

/// 8x8 image, patch 4: four tokens.
inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t d = 16, std::size_t heads = 2) {
    ModelConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.channels = 3;
    c.token_dim = d;
    c.layers = layers;
    c.heads = heads;
    c.num_conditions = 4;
    c.mlp_ratio = 2;
    return c;
}

/// Weights with the small modulation/head scales replaced by unit-scale
/// normals, so every pathway carries signal in tests.
template <class T>
ModelWeights<T> lively_weights(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ModelWeights<T> w = init_weights<T>(cfg, rng);
    w.for_each_param([&](const std::string&, Tensor<T>& t) {
        const double s = t.rank() == 2 ? 1.0 / std::sqrt(static_cast<double>(t.dim(0))) : 0.3;
        for (auto& v : t.values()) v += static_cast<T>(s * rng.normal());
    });
    return w;
}

template <class T>
Tensor<T> random_tensor(Rng& rng, Shape s, double scale = 1.0) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
    return t;
}

inline PixelMask random_mask(Rng& rng, std::size_t h, std::size_t w, double p) {
    PixelMask m(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) m.set(y, x, rng.bernoulli(p));
    return m;
}

inline TokenPartition partition_of(std::size_t P, const std::vector<std::size_t>& fg) {
    std::vector<char> flags(P, 0);
    for (auto i : fg) flags[i] = 1;
    return TokenPartition::from_flags(flags);
}

/// Naive single-head softmax(Q K^T / sqrt(d)) V in long double.
template <class T>
Tensor<T> naive_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V) {
    const std::size_t F = Q.rows(), P = K.rows(), d = Q.cols();
    Tensor<T> out = Tensor<T>::matrix(F, V.cols());
    for (std::size_t q = 0; q < F; ++q) {
        std::vector<long double> s(P);
        long double mx = -std::numeric_limits<long double>::infinity();
        for (std::size_t k = 0; k < P; ++k) {
            long double acc = 0;
            for (std::size_t c = 0; c < d; ++c) acc += (long double)Q.at(q, c) * (long double)K.at(k, c);
            s[k] = acc / std::sqrt((long double)d);
            mx = std::max(mx, s[k]);
        }
        long double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t c = 0; c < V.cols(); ++c) {
            long double acc = 0;
            for (std::size_t k = 0; k < P; ++k) acc += s[k] / z * (long double)V.at(k, c);
            out.at(q, c) = static_cast<T>(acc);
        }
    }
    return out;
}

/// A multiple of 2^-12 in [-4, 4): exact under the additions the stub
/// reversibility tests perform.
inline double dyadic(Rng& rng) { return std::ldexp(static_cast<double>(rng.below(1 << 15)) - (1 << 14), -12); }

template <class T>
Tensor<T> dyadic_tensor(Rng& rng, Shape s) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.values()) v = static_cast<T>(dyadic(rng));
    return t;
}

} // namespace kvtest
