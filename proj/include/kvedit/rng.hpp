// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "kvedit/tensor.hpp"

namespace kvedit {

/// Counter-based generator: the n-th draw is a pure function of (key, n),
/// so streams are reproducible and can be forked without shared state.
/// The mixing function is the SplitMix64 finalizer.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

    std::uint64_t seed_key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * (++counter_)); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1].
    double uniform_open0() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; consumes two draws.
    double normal() {
        const double u1 = uniform_open0();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Independent child stream, a pure function of (this key, stream id).
    Rng fork(std::uint64_t stream) const {
        Rng child;
        child.key_ = mix(key_ ^ mix(stream + 0xbb67ae8584caa73bULL));
        return child;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

template <class T>
Tensor<T> sample_gaussian(Rng& rng, Shape shape) {
    Tensor<T> out(std::move(shape));
    for (auto& v : out.values()) v = static_cast<T>(rng.normal());
    return out;
}

template <class T>
Tensor<T> sample_uniform(Rng& rng, Shape shape, double lo, double hi) {
    Tensor<T> out(std::move(shape));
    for (auto& v : out.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return out;
}

} // namespace kvedit
