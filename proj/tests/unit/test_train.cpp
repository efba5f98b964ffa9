// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "support.hpp"

using namespace kvtest;

TEST(Dataset, DeterministicAndInRange) {
    ModelConfig cfg;
    auto a = gen_dataset<float>(5, 20, cfg);
    auto b = gen_dataset<float>(5, 20, cfg);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].condition, b[i].condition);
        for (float v : a[i].image.values()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    EXPECT_EQ(gen_sample<float>(5, 7, cfg).image, a[7].image);
    EXPECT_NE(gen_dataset<float>(6, 1, cfg)[0].image, a[0].image);
    EXPECT_THROW(gen_dataset<float>(5, 0, cfg), ConfigError);
}

TEST(Dataset, ClassHistogramIsRoughlyUniform) {
    ModelConfig cfg;
    std::map<std::size_t, int> hist;
    for (const auto& s : gen_dataset<float>(1, 1000, cfg)) ++hist[s.condition.id];
    ASSERT_EQ(hist.size(), cfg.num_conditions);
    const double expect = 1000.0 / static_cast<double>(cfg.num_conditions);
    for (auto [id, n] : hist) {
        EXPECT_GE(n, 0.7 * expect) << "class " << id;
        EXPECT_LE(n, 1.3 * expect) << "class " << id;
    }
}

TEST(Dataset, ConditionMatchesRenderedContent) {
    ModelConfig cfg;
    for (const auto& s : gen_dataset<double>(2, 50, cfg)) {
        const auto x = static_cast<std::size_t>(s.center_x), y = static_cast<std::size_t>(s.center_y);
        for (std::size_t c = 0; c < 3; ++c)
            EXPECT_EQ(s.image[(c * 16 + y) * 16 + x], kPalette[class_color(s.condition.id)][c]);
        EXPECT_EQ(s.shape, class_shape(s.condition.id));
    }
}

TEST(RfLoss, StubPredictors) {
    ModelConfig cfg;
    auto batch = gen_dataset<double>(3, 6, cfg);
    Rng r2(4);
    auto ex = draw_flow_examples(batch, cfg, r2, 0.1);
    std::size_t k = 0;
    Rng r3(4);
    const double perfect = rf_loss(batch, cfg, r3, 0.1, [&](const TokenState<double>&, ConditionId) {
        return ex[k++].target();
    });
    EXPECT_EQ(perfect, 0.0);
    Rng r4(4);
    const double zero_model = rf_loss(batch, cfg, r4, 0.1, [&](const TokenState<double>& s, ConditionId) {
        return Tensor<double>(s.tokens.shape());
    });
    double direct = 0;
    std::size_t n = 0;
    for (const auto& e : ex) {
        const auto target = e.target();
        for (double v : target.values()) {
            direct += v * v;
            ++n;
        }
    }
    EXPECT_NEAR(zero_model, direct / static_cast<double>(n), 1e-12);
}

TEST(RfLoss, PathEndpointAndPermutationInvariance) {
    ModelConfig cfg = tiny_config();
    auto batch = gen_dataset<double>(5, 5, cfg);
    Rng rng(6);
    auto ex = draw_flow_examples(batch, cfg, rng, 0.0);
    FlowExample<double> e0 = ex[0];
    e0.t = 0.0;
    EXPECT_EQ(e0.noised(), e0.x0);
    auto w = lively_weights<double>(cfg, 7);
    const double a = flow_loss_and_grad<double>(ex, w, nullptr);
    std::reverse(ex.begin(), ex.end());
    EXPECT_NEAR(flow_loss_and_grad<double>(ex, w, nullptr), a, 1e-12);
    std::rotate(ex.begin(), ex.begin() + 2, ex.end());
    EXPECT_NEAR(flow_loss(ex, [&](const TokenState<double>& s, ConditionId c) {
                    return forward_velocity(s, c, w).velocity;
                }),
                a, 1e-12);
}

TEST(TrainStep, UpdatesWeightsUnlessLearningRateIsZero) {
    ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 8);
    auto batch = gen_dataset<float>(9, 4, cfg);
    TrainConfig tc;
    auto w1 = w;
    auto opt = AdamState<float>::init(w1);
    Rng rng(10);
    (void)train_step(w1, batch, opt, tc, rng);
    float delta = 0;
    auto a = w.flat_params(), b = w1.flat_params();
    for (std::size_t i = 0; i < a.size(); ++i) delta = std::max(delta, std::abs(a[i] - b[i]));
    EXPECT_GT(delta, 0.0f);
    tc.learning_rate = 0.0;
    auto w2 = w;
    auto opt2 = AdamState<float>::init(w2);
    Rng rng2(10);
    (void)train_step(w2, batch, opt2, tc, rng2);
    EXPECT_EQ(w2.flat_params(), w.flat_params());
}

TEST(TrainStep, NonFiniteWeightsAbortWithStepIndex) {
    ModelConfig cfg = tiny_config();
    auto w = lively_weights<float>(cfg, 11);
    w.w_head[0] = std::numeric_limits<float>::quiet_NaN();
    auto batch = gen_dataset<float>(12, 2, cfg);
    auto opt = AdamState<float>::init(w);
    Rng rng(13);
    try {
        (void)train_step(w, batch, opt, TrainConfig{}, rng);
        FAIL();
    } catch (const NumericError&) {
    }
}

TEST(Train, ReproducibleUnderSeed) {
    ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.steps = 5;
    tc.batch = 3;
    tc.seed = 21;
    Rng r1(1), r2(1);
    auto a = init_weights<float>(cfg, r1), b = init_weights<float>(cfg, r2);
    auto ra = train(a, tc), rb = train(b, tc);
    EXPECT_EQ(ra.step_losses, rb.step_losses);
    EXPECT_EQ(a.flat_params(), b.flat_params());
    tc.cond_dropout = 1.0;
    EXPECT_THROW(train(a, tc), ConfigError);
}

TEST(GradCheck, FullTinyModel) {
    ModelConfig cfg = tiny_config(2, 16, 2);
    auto w = lively_weights<double>(cfg, 14);
    Rng rng(15);
    auto ex = draw_flow_examples(gen_dataset<double>(16, 2, cfg), cfg, rng, 0.0);
    ex[1].condition = ConditionId::null(cfg);
    auto res = grad_check(w, ex, 200);
    EXPECT_EQ(res.coords_checked, 200u);
    EXPECT_LT(res.max_rel_error, 1e-6) << "worst index " << res.worst_index << ", max abs " << res.max_abs_error;
}

TEST(GradCheck, LinearVelocityModel) {
    // v = X A + b against target Y; loss = mean (v - Y)^2
    Rng rng(17);
    const std::size_t n = 6, k = 5, m = 4;
    auto X = random_tensor<double>(rng, {n, k});
    auto Y = random_tensor<double>(rng, {n, m});
    std::vector<double> params(k * m + m);
    for (auto& p : params) p = rng.normal();
    auto residual = [&]() {
        Tensor<double> r = Tensor<double>::matrix(n, m);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double v = params[k * m + j];
                for (std::size_t q = 0; q < k; ++q) v += X.at(i, q) * params[q * m + j];
                r.at(i, j) = v - Y.at(i, j);
            }
        return r;
    };
    std::function<double()> loss = [&]() {
        auto r = residual();
        double s = 0;
        for (double v : r.values()) s += v * v;
        return s / static_cast<double>(n * m);
    };
    auto r = residual();
    std::vector<double> grad(params.size(), 0.0);
    const double sc = 2.0 / static_cast<double>(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t q = 0; q < k; ++q) grad[q * m + j] += sc * X.at(i, q) * r.at(i, j);
            grad[k * m + j] += sc * r.at(i, j);
        }
    Rng pick(18);
    auto res = grad_check_coords(params, grad, loss, 100, pick);
    EXPECT_LT(res.max_rel_error, 1e-9);
}

TEST(GradCheck, ZeroGradientCoordinatesUseAbsoluteTolerance) {
    std::vector<double> params{1.0, 2.0};
    std::function<double()> loss = [&]() { return params[0] * params[0]; };
    Rng rng(19);
    auto res = grad_check_coords(params, {2.0, 0.0}, loss, 50, rng);
    EXPECT_LT(res.max_rel_error, 1e-9);
    auto bad = grad_check_coords(params, {2.0, 1e-3}, loss, 50, rng);
    EXPECT_GT(bad.max_rel_error, 0.5);
}
