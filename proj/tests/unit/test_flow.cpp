// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "support.hpp"

using namespace kvtest;

TEST(TimeGrid, Examples) {
    auto g = make_time_grid(28, 4);
    EXPECT_EQ(g.steps(), 24u);
    EXPECT_EQ(g.top(), 24.0 / 28.0);
    EXPECT_EQ(g.t.front(), 0.0);
    for (std::size_t i = 1; i < g.t.size(); ++i) EXPECT_LT(g.t[i - 1], g.t[i]);
    EXPECT_EQ(make_time_grid(28, 0).top(), 1.0);
    EXPECT_EQ(make_time_grid(1, 0).t, (std::vector<double>{0.0, 1.0}));
    EXPECT_THROW(make_time_grid(4, 4), ConfigError);
    EXPECT_THROW(make_time_grid(0, 0), ConfigError);
}

TEST(Flow, StubStepIsALinearUpdate) {
    const ModelConfig cfg = tiny_config();
    ConstantField<double> f(cfg, 0.75, 2);
    Rng rng(1);
    TokenState<double> x{random_tensor<double>(rng, {4, 48}), {}, 0.0};
    auto g = make_time_grid(10, 0);
    auto y = invert_step(f, x, g, 1, {0}, 1.0).state;
    EXPECT_EQ(y.t, g.t[1]);
    for (std::size_t i = 0; i < y.tokens.size(); ++i) EXPECT_EQ(y.tokens[i], x.tokens[i] + 0.1 * 0.75);
    auto z = denoise_step(f, y, g, 1, {0}, 1.0).state;
    for (std::size_t i = 0; i < z.tokens.size(); ++i) EXPECT_EQ(z.tokens[i], y.tokens[i] - 0.1 * 0.75);
    EXPECT_EQ(euler_update(x.tokens, x.tokens, 0.0), x.tokens);
}

TEST(Flow, OffGridStatesAreRejected) {
    const ModelConfig cfg = tiny_config();
    ConstantField<float> f(cfg, 1.0f, 2);
    auto g = make_time_grid(8, 0);
    TokenState<float> x{Tensor<float>::matrix(4, 48), {}, 0.3};
    EXPECT_THROW(invert_step(f, x, g, 1, {0}, 1.0), ShapeError);
    x.t = 0.0;
    EXPECT_THROW(invert_step(f, x, g, 9, {0}, 1.0), ShapeError);
    EXPECT_THROW(denoise_step(f, x, g, 1, {0}, 1.0), ShapeError);
}

TEST(Flow, StubRoundTripIsBitwiseOnDyadicGrids) {
    const ModelConfig cfg = tiny_config();
    Rng rng(2);
    for (auto [total, skip] : {std::pair{16, 0}, {16, 4}, {8, 3}, {32, 0}}) {
        ConstantField<double> f(cfg, dyadic(rng), 2);
        auto x0 = dyadic_tensor<double>(rng, {4, 48});
        auto g = make_time_grid(total, skip);
        auto traj = invert(f, x0, {1}, g, 1.0, true);
        ASSERT_EQ(traj.states.size(), g.steps() + 1);
        for (std::size_t i = 1; i < traj.states.size(); ++i) EXPECT_LT(traj.states[i - 1].t, traj.states[i].t);
        auto back = denoise(f, traj.final_state(), {1}, g, 1.0);
        EXPECT_EQ(back.t, 0.0);
        EXPECT_EQ(back.tokens, x0);
    }
}

TEST(Flow, StubRoundTripOnTheDefaultGridIsTight) {
    const ModelConfig cfg = tiny_config();
    Rng rng(3);
    ConstantField<double> f(cfg, 0.3, 2);
    auto x0 = random_tensor<double>(rng, {4, 48});
    auto g = make_time_grid(28, 4);
    auto back = denoise(f, invert(f, x0, {1}, g, 1.0).final_state(), {1}, g, 1.0);
    EXPECT_LT(max_abs_diff(back.tokens, x0), 1e-13);
}

TEST(Flow, ZeroVelocityIsAFixedPoint) {
    const ModelConfig cfg = tiny_config();
    ConstantField<float> f(cfg, 0.0f, 2);
    Rng rng(4);
    auto x0 = random_tensor<float>(rng, {4, 48});
    auto g = make_time_grid(28, 4);
    auto top = invert(f, x0, {0}, g, 1.0).final_state();
    EXPECT_EQ(top.tokens, x0);
    EXPECT_EQ(denoise(f, top, {0}, g, 1.0).tokens, x0);
}

TEST(Flow, ReconCurveForStubIsZero) {
    const ModelConfig cfg = tiny_config();
    Rng rng(5);
    ConstantField<double> f(cfg, 0.5, 2);
    auto x0 = dyadic_tensor<double>(rng, {4, 48});
    auto curve = recon_error_curve(f, x0, {0}, make_time_grid(16, 0));
    ASSERT_EQ(curve.size(), 17u);
    for (std::size_t i = 0; i < curve.size(); ++i) {
        EXPECT_EQ(curve[i].first, i);
        EXPECT_EQ(curve[i].second, 0.0);
    }
}

TEST(Flow, ReconCurveForNetworkStartsAtZero) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<double>(cfg, 6);
    DiTField<double> f(w);
    Rng rng(7);
    auto x0 = random_tensor<double>(rng, {4, 48}, 0.5);
    auto curve = recon_error_curve(f, x0, {1}, make_time_grid(8, 0));
    EXPECT_EQ(curve.front().second, 0.0);
    for (const auto& [i, m] : curve) EXPECT_GE(m, 0.0);
    EXPECT_GT(curve.back().second, 0.0);
}

TEST(Flow, NetworkInversionMovesTheInput) {
    const ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 8);
    DiTField<float> f(w);
    Rng rng(9);
    auto x0 = random_tensor<float>(rng, {4, 48}, 0.5);
    auto top = invert(f, x0, {2}, make_time_grid(8, 2), 1.5).final_state();
    EXPECT_GT(max_abs_diff(top.tokens, x0), 0.0f);
    EXPECT_TRUE(top.tokens.all_finite());
}

TEST(Ddim, StationaryScheduleAndZeroNoise) {
    Rng rng(10);
    auto x = random_tensor<double>(rng, {3, 5});
    DdimSchedule flat{{0.5, 0.5}, {0.3, 0.3}};
    EXPECT_LT(max_abs_diff(ddim_step(x, random_tensor<double>(rng, {3, 5}), flat, 1), x), 1e-14);
    DdimSchedule s{{0.9, 0.6}, {0.1, 0.4}};
    auto y = ddim_step(x, Tensor<double>({3, 5}), s, 1);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], 0.9 / 0.6 * x[i], 1e-15);
    DdimSchedule dead{{0.5, 0.0}, {0.5, 1.0}};
    EXPECT_THROW(ddim_step(x, x, dead, 1), NumericError);
    EXPECT_THROW(ddim_step(x, x, s, 2), ShapeError);
}

TEST(Ddim, LinearScheduleMatchesEulerStep) {
    Rng rng(11);
    auto g = make_time_grid(28, 4);
    auto s = linear_ddim_schedule(g);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t i = 1 + rng.below(g.steps());
        auto x = random_tensor<double>(rng, {4, 48});
        auto v = random_tensor<double>(rng, {4, 48});
        auto eps = velocity_to_eps(x, v, g.t[i]);
        auto a = ddim_step(x, eps, s, i);
        auto b = euler_update(x, v, g.t[i - 1] - g.t[i]);
        EXPECT_LT(max_abs_diff(a, b), 1e-12);
    }
}
