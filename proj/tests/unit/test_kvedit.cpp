// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

using namespace kvtest;

namespace {

/// Wraps a field and counts velocity calls per attention mode.
template <class T, class Inner>
struct CountingField {
    const Inner* inner;
    mutable std::size_t calls = 0;
    mutable std::size_t inject_calls = 0;

    VelocityOutput<T> velocity(const TokenState<T>& s, ConditionId c, double g, const KvMode<T>& kv) const {
        ++calls;
        if (kv.mode == AttentionMode::Inject) ++inject_calls;
        return inner->velocity(s, c, g, kv);
    }
    std::size_t num_layers() const { return inner->num_layers(); }
    const ModelConfig& config() const { return inner->config(); }
};

template <class T>
Tensor<T> random_image(Rng& rng, const ModelConfig& cfg) {
    return sample_uniform<T>(rng, {cfg.channels, cfg.image_size, cfg.image_size}, 0.0, 1.0);
}

template <class T>
bool background_equal(const Tensor<T>& a, const Tensor<T>& b, const PixelMask& m) {
    const std::size_t H = m.height, W = m.width;
    for (std::size_t c = 0; c < a.dim(0); ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                if (!m.at(y, x) && a[(c * H + y) * W + x] != b[(c * H + y) * W + x]) return false;
    return true;
}

} // namespace

TEST(Partition, Examples) {
    ModelConfig cfg;
    auto empty = partition_tokens(PixelMask(16, 16), cfg);
    EXPECT_TRUE(empty.fg.empty());
    EXPECT_EQ(empty.bg.size(), 16u);
    PixelMask one(16, 16);
    one.set(0, 0, true);
    EXPECT_EQ(partition_tokens(one, cfg).fg, (std::vector<std::size_t>{0}));
    EXPECT_THROW(partition_tokens(PixelMask(8, 16), cfg), ShapeError);
}

TEST(Partition, MatchesNaiveOracle) {
    ModelConfig cfg;
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        auto m = random_mask(rng, 16, 16, 0.02 * trial);
        std::vector<std::size_t> fg, bg;
        for (std::size_t k = 0; k < 16; ++k) {
            const std::size_t ty = k / 4, tx = k % 4;
            bool any = false;
            for (std::size_t dy = 0; dy < 4; ++dy)
                for (std::size_t dx = 0; dx < 4; ++dx) any = any || m.at(ty * 4 + dy, tx * 4 + dx);
            (any ? fg : bg).push_back(k);
        }
        auto p = partition_tokens(m, cfg);
        EXPECT_EQ(p.fg, fg);
        EXPECT_EQ(p.bg, bg);
        p.validate(16);
    }
}

TEST(DecoupledAttention, ForegroundRowsMatchFullAttention) {
    Rng rng(2);
    auto Q = random_tensor<float>(rng, {4, 8});
    auto K = random_tensor<float>(rng, {4, 8});
    auto V = random_tensor<float>(rng, {4, 8});
    const std::vector<std::size_t> fg{1, 3}, bg{0, 2};
    auto full = naive_attention(Q, K, V);
    auto Kfull = assemble_rows(4, fg, gather_rows(K, std::span<const std::size_t>(fg)), bg,
                               gather_rows(K, std::span<const std::size_t>(bg)));
    auto Vfull = assemble_rows(4, fg, gather_rows(V, std::span<const std::size_t>(fg)), bg,
                               gather_rows(V, std::span<const std::size_t>(bg)));
    EXPECT_EQ(Kfull, K);
    auto out = decoupled_attention(gather_rows(Q, std::span<const std::size_t>(fg)), Kfull, Vfull);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(r, c), full.at(fg[r], c), 1e-6);
    EXPECT_LT(max_abs_diff(decoupled_attention(Q, K, V), full), 1e-6f);
}

TEST(DecoupledAttention, SingleTokenReturnsV) {
    Rng rng(3);
    auto q = random_tensor<double>(rng, {1, 4});
    auto k = random_tensor<double>(rng, {1, 4});
    auto v = random_tensor<double>(rng, {1, 4});
    EXPECT_EQ(decoupled_attention(q, k, v), v);
}

TEST(DecoupledAttention, AssemblyGapsAndOverlapsAreRejected) {
    auto rows = Tensor<float>::matrix(1, 2);
    const std::vector<std::size_t> a{0}, b{2}, c{0};
    EXPECT_THROW(assemble_rows(3, a, rows, b, rows), ShapeError);
    EXPECT_THROW(assemble_rows(1, a, rows, c, rows), ShapeError);
}

TEST(InvertWithCache, FullForegroundCachesEmptyEntries) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 4);
    DiTField<float> f(w);
    Rng rng(5);
    EditConfig ec;
    ec.steps = 6;
    ec.skip = 1;
    auto inv = invert_with_cache(f, random_image<float>(rng, cfg), PixelMask(8, 8, 1), {0}, ec);
    EXPECT_EQ(inv.cache.size(), cfg.layers * 5);
    for (auto [i, j] : inv.cache.keys()) EXPECT_EQ(inv.cache.get(i, j).k.rows(), 0u);
}

TEST(InvertWithCache, CachedRowsSliceThePlainPass) {
    ModelConfig cfg = tiny_config(1);
    auto w = lively_weights<double>(cfg, 6);
    DiTField<double> f(w);
    Rng rng(7);
    auto x0 = random_image<double>(rng, cfg);
    auto mask = PixelMask::rect(8, 8, 0, 4, 4, 8);
    EditConfig ec;
    ec.steps = 2;
    ec.skip = 0;
    ec.guidance.inversion = 1.0;
    auto inv = invert_with_cache(f, x0, mask, {1}, ec);
    ASSERT_EQ(inv.partition.bg, (std::vector<std::size_t>{0, 2, 3}));
    auto grid = ec.grid();
    TokenState<double> x{patchify(x0, cfg), {}, 0.0};
    for (std::size_t i = 1; i <= 2; ++i) {
        Activations<double> acts;
        auto out = forward_velocity(x, {1}, w, KvMode<double>::plain(), &acts);
        const auto& e = inv.cache.get(i, 1);
        EXPECT_EQ(e.k, gather_rows(acts.layers[0].k, std::span<const std::size_t>(inv.partition.bg)));
        EXPECT_EQ(e.v, gather_rows(acts.layers[0].v, std::span<const std::size_t>(inv.partition.bg)));
        x = {euler_update(x.tokens, out.velocity, grid.t[i] - grid.t[i - 1]), {}, grid.t[i]};
    }
}

TEST(InvertWithCache, DefaultGridKeys) {
    ModelConfig cfg;
    ConstantField<float> f(cfg, 0.1f, cfg.layers);
    Rng rng(8);
    auto inv = invert_with_cache(f, random_image<float>(rng, cfg), PixelMask::rect(16, 16, 4, 4, 8, 8), {0},
                                 EditConfig{});
    std::vector<KVCache<float>::Key> expected;
    for (std::size_t i = 1; i <= 24; ++i)
        for (std::size_t j = 1; j <= cfg.layers; ++j) expected.push_back({i, j});
    EXPECT_EQ(inv.cache.keys(), expected);
}

TEST(Reinitialize, FormulaAndEndpoints) {
    Rng rng(9);
    TokenState<double> z{random_tensor<double>(rng, {3, 6}), {1, 2, 5}, 0.5};
    Rng a(10), b(10);
    auto noise = sample_gaussian<double>(b, z.tokens.shape());
    EXPECT_EQ(reinitialize(z, 1.0, a).tokens, noise);
    Rng c(11);
    EXPECT_EQ(reinitialize(z, 0.0, c).tokens, z.tokens);
    TokenState<double> zero{Tensor<double>({3, 6}), {1, 2, 5}, 0.5};
    Rng d(12), e(12);
    auto n2 = sample_gaussian<double>(e, zero.tokens.shape());
    auto half = reinitialize(zero, 0.5, d).tokens;
    for (std::size_t i = 0; i < half.size(); ++i) EXPECT_EQ(half[i], 0.5 * n2[i]);
    const double tn = 24.0 / 28.0;
    Rng g1(13), g2(13);
    auto fused = reinitialize(z, tn, g1);
    auto n3 = sample_gaussian<double>(g2, z.tokens.shape());
    for (std::size_t i = 0; i < fused.tokens.size(); ++i)
        EXPECT_EQ(fused.tokens[i] - (n3[i] * tn + z.tokens[i] * (1.0 - tn)), 0.0);
    EXPECT_EQ(fused.index, z.index);
    EXPECT_THROW(reinitialize(z, 1.5, g1), ConfigError);
}

TEST(DenoiseForeground, StubReproducesForegroundRowsExactly) {
    ModelConfig cfg;
    Rng rng(14);
    ConstantField<double> f(cfg, dyadic(rng), 3);
    Tensor<double> x0({3, 16, 16});
    for (auto& v : x0.values()) v = dyadic(rng);
    auto mask = PixelMask::rect(16, 16, 3, 5, 11, 9);
    EditConfig ec;
    ec.steps = 16;
    ec.skip = 0;
    auto inv = invert_with_cache(f, x0, mask, {2}, ec);
    const auto& fg = inv.partition.fg;
    TokenState<double> z{gather_rows(inv.top.tokens, std::span<const std::size_t>(fg)), fg, inv.top.t};
    auto out = denoise_foreground(f, z, inv.cache, {2}, inv.grid, ec.guidance.denoise);
    EXPECT_EQ(out.tokens, gather_rows(patchify(x0, cfg), std::span<const std::size_t>(fg)));
    EXPECT_EQ(out.t, 0.0);
}

TEST(DenoiseForeground, FetchOrderAndLog) {
    ModelConfig cfg;
    ConstantField<float> f(cfg, 0.25f, cfg.layers);
    Rng rng(15);
    EditConfig ec;
    auto inv = invert_with_cache(f, random_image<float>(rng, cfg), PixelMask::rect(16, 16, 0, 0, 5, 5), {0}, ec);
    const auto& fg = inv.partition.fg;
    TokenState<float> z{gather_rows(inv.top.tokens, std::span<const std::size_t>(fg)), fg, inv.top.t};
    std::vector<EditLogEntry> log;
    inv.cache.set_trace(true);
    (void)denoise_foreground(f, z, inv.cache, {1}, inv.grid, 5.5, 1.0, &log);
    std::vector<KVCache<float>::Key> expected;
    for (std::size_t i = 24; i >= 1; --i)
        for (std::size_t j = 1; j <= cfg.layers; ++j) expected.push_back({i, j});
    EXPECT_EQ(inv.cache.accesses(), expected);
    ASSERT_EQ(log.size(), 24u);
    EXPECT_EQ(log.front().step, 1u);
    EXPECT_EQ(log.front().t, 24.0 / 28.0);
    EXPECT_EQ(log.front().fg_count, fg.size());
    EXPECT_EQ(log.front().cache_hits, cfg.layers);
}

TEST(DenoiseForeground, MissingEntryIsNamed) {
    ModelConfig cfg;
    ConstantField<float> f(cfg, 0.25f, 2);
    auto grid = make_time_grid(4, 0);
    KVCache<float> empty;
    TokenState<float> z{Tensor<float>::matrix(1, 48), {0}, 1.0};
    try {
        (void)denoise_foreground(f, z, empty, {0}, grid, 1.0);
        FAIL();
    } catch (const CacheError& e) {
        EXPECT_NE(std::string(e.what()).find("(i=4, j=1)"), std::string::npos);
    }
}

TEST(Composite, Examples) {
    Rng rng(16);
    ModelConfig cfg;
    auto a = random_image<float>(rng, cfg), b = random_image<float>(rng, cfg);
    EXPECT_EQ(composite(a, b, PixelMask(16, 16)), b);
    EXPECT_EQ(composite(a, b, PixelMask(16, 16, 1)), a);
    auto m = random_mask(rng, 16, 16, 0.4);
    auto out = composite(a, b, m);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) {
                const std::size_t i = (c * 16 + y) * 16 + x;
                EXPECT_EQ(out[i], m.at(y, x) ? a[i] : b[i]);
            }
    EXPECT_THROW(composite(a, b, PixelMask(8, 8)), ShapeError);
}

TEST(Edit, EmptyMaskNeverQueriesTheModel) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 17);
    DiTField<float> inner(w);
    CountingField<float, DiTField<float>> f{&inner};
    Rng rng(18);
    auto x0 = random_image<float>(rng, cfg);
    auto out = edit(f, x0, PixelMask(8, 8), {0}, {1}, EditConfig{});
    EXPECT_EQ(out.image, x0);
    EXPECT_EQ(f.calls, 0u);
}

TEST(Edit, BackgroundIsBitExactForAllFlagCombinations) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 19);
    DiTField<float> f(w);
    Rng rng(20);
    for (int combo = 0; combo < 8; ++combo) {
        EditConfig ec;
        ec.steps = 6;
        ec.skip = 1;
        ec.reinit = combo & 1;
        ec.inversion_attention_mask = combo & 2;
        ec.attention_scale = (combo & 4) ? 1.5 : 1.0;
        ec.seed = combo;
        auto x0 = random_image<float>(rng, cfg);
        auto m = random_mask(rng, 8, 8, 0.15);
        if (m.empty_region()) m.set(0, 0, true);
        auto out = edit(f, x0, m, {0}, {3}, ec);
        EXPECT_TRUE(background_equal(out.image, x0, m)) << "combo " << combo;
        EXPECT_GT(max_abs_diff(out.image, x0), 0.0f);
    }
}

TEST(Edit, FullMaskReducesToVanillaEditing) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 21);
    DiTField<float> f(w);
    Rng rng(22);
    auto x0 = random_image<float>(rng, cfg);
    EditConfig ec;
    ec.steps = 8;
    ec.skip = 2;
    auto kv = edit(f, x0, PixelMask(8, 8, 1), {0}, {2}, ec).image;
    auto vanilla = vanilla_edit(f, x0, {0}, {2}, ec);
    EXPECT_LE(max_abs_diff(kv, vanilla), 1e-5f);
}

TEST(Edit, InvertOnceEditManyMatchesFreshEdits) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 23);
    DiTField<float> f(w);
    Rng rng(24);
    auto x0 = random_image<float>(rng, cfg);
    auto m = PixelMask::rect(8, 8, 2, 2, 6, 5);
    EditConfig ec;
    ec.steps = 6;
    ec.skip = 1;
    auto inv = invert_with_cache(f, x0, m, {0}, ec);
    const auto path = std::filesystem::temp_directory_path() / "kvedit_unit_reuse.kvc";
    inv.cache.persist(path);
    auto reloaded = inv;
    reloaded.cache = KVCache<float>::load(path);
    for (std::size_t tgt : {1u, 2u, 3u}) {
        auto fresh = edit(f, x0, m, {0}, {tgt}, ec).image;
        EXPECT_EQ(edit_from_inversion(f, inv, {tgt}, ec).image, fresh);
        EXPECT_EQ(edit_from_inversion(f, reloaded, {tgt}, ec).image, fresh);
    }
}

TEST(Edit, DriftExperimentKeepsKvBackgroundExact) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 25);
    DiTField<float> f(w);
    Rng rng(26);
    auto x0 = random_image<float>(rng, cfg);
    EditConfig ec;
    ec.steps = 6;
    ec.skip = 1;
    auto r = drift_experiment(f, x0, PixelMask::rect(8, 8, 0, 0, 4, 4), {0}, {2}, ec);
    EXPECT_EQ(r.bg_mse_kvedit, 0.0);
    EXPECT_GT(r.bg_mse_vanilla, 0.0);
    EXPECT_THROW(drift_experiment(f, x0, PixelMask(8, 8), {0}, {2}, ec), ConfigError);
}

TEST(EditConfig, Validation) {
    EditConfig ec;
    EXPECT_NO_THROW(ec.validate());
    ec.attention_scale = 0.9;
    EXPECT_THROW(ec.validate(), ConfigError);
    ec = {};
    ec.skip = 28;
    EXPECT_THROW(ec.validate(), ConfigError);
    ec = {};
    ec.guidance.denoise = -1;
    EXPECT_THROW(ec.validate(), ConfigError);
}
