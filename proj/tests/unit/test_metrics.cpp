// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "support.hpp"

using namespace kvtest;

TEST(Metrics, MseExamples) {
    Tensor<double> a({3, 4, 4}, 0.0), b({3, 4, 4}, 1.0);
    EXPECT_EQ(mse(a, a), 0.0);
    EXPECT_EQ(mse(a, b), 1.0);
    EXPECT_THROW(mse(a, Tensor<double>({3, 4, 5})), ShapeError);
    EXPECT_THROW(mse(a, b, PixelMask(4, 4)), NumericError);
}

TEST(Metrics, MseMatchesNaiveLoopAndIsSymmetric) {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = random_tensor<double>(rng, {3, 8, 8});
        auto b = random_tensor<double>(rng, {3, 8, 8});
        auto m = random_mask(rng, 8, 8, 0.5);
        m.set(0, 0, true);
        m.set(7, 7, false);
        double full = 0, reg = 0;
        std::size_t nr = 0;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t x = 0; x < 8; ++x) {
                    const double d = a[(c * 8 + y) * 8 + x] - b[(c * 8 + y) * 8 + x];
                    full += d * d;
                    if (m.at(y, x)) {
                        reg += d * d;
                        ++nr;
                    }
                }
        EXPECT_NEAR(mse(a, b), full / 192.0, 1e-10);
        EXPECT_NEAR(mse(a, b, m), reg / static_cast<double>(nr), 1e-10);
        EXPECT_EQ(mse(a, b), mse(b, a));
        const double nf = static_cast<double>(m.count()), nb = 64.0 - nf;
        EXPECT_NEAR(mse(a, b), (nf * mse(a, b, m) + nb * mse(a, b, m.inverted())) / 64.0, 1e-10);
    }
}

TEST(Metrics, PsnrExamples) {
    EXPECT_EQ(psnr_from_mse(0.0), kPsnrCapDb);
    EXPECT_EQ(psnr_from_mse(1e-11), kPsnrCapDb);
    EXPECT_NEAR(psnr_from_mse(0.01), 20.0, 1e-12);
    EXPECT_NEAR(psnr_from_mse(1e-4), 40.0, 1e-12);
    double prev = psnr_from_mse(1e-9);
    for (double m = 2e-9; m < 1.0; m *= 3) {
        const double p = psnr_from_mse(m);
        EXPECT_LT(p, prev);
        prev = p;
    }
    Tensor<double> a({3, 2, 2}, 0.5);
    EXPECT_EQ(psnr(a, a), kPsnrCapDb);
}

TEST(Metrics, RegionReport) {
    Tensor<double> a({3, 4, 4}, 0.0), b({3, 4, 4}, 0.0);
    auto m = PixelMask::rect(4, 4, 0, 0, 2, 4);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t x = 0; x < 4; ++x) b[(c * 4 + 0) * 4 + x] = 0.5;
    auto r = region_report(b, a, m);
    ASSERT_TRUE(r.mse_bg && r.mse_fg && r.psnr_bg);
    EXPECT_EQ(*r.mse_bg, 0.0);
    EXPECT_EQ(*r.psnr_bg, kPsnrCapDb);
    EXPECT_NEAR(*r.mse_fg, 0.125, 1e-15);
    EXPECT_NEAR(r.mse_full, 0.0625, 1e-15);
    auto all = region_report(b, a, PixelMask(4, 4, 1));
    EXPECT_FALSE(all.mse_bg.has_value());
}
