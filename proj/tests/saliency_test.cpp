// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <probe/saliency.hpp>
#include <probe/synthetic.hpp>

#include <gtest/gtest.h>

using namespace probe;
using probe::testing::random_image;

TEST(Saliency, MinMaxSpansUnitInterval)
{
    Rng  rng(1);
    Grid g = probe::testing::random_grid(rng, 5, 7);
    for (float &v : g.data)
        v = 3.0f * v - 1.0f;
    bool degenerate = true;
    Grid n          = normalize_min_max(g, &degenerate);
    EXPECT_FALSE(degenerate);
    EXPECT_FLOAT_EQ(*std::min_element(n.data.begin(), n.data.end()), 0.0f);
    EXPECT_FLOAT_EQ(*std::max_element(n.data.begin(), n.data.end()), 1.0f);
}

TEST(Saliency, ConstantChannelGivesDegenerateZeroMask)
{
    FeatureMaps maps(2, 4, 4, 0.0f);
    for (float &v : maps.plane(1))
        v = 2.5f;
    for (int j : {0, 1})
    {
        SoftMask m = neural_activation_map(maps, j, {32, 32}, "x");
        EXPECT_TRUE(m.degenerate);
        EXPECT_EQ(m.size(), (Size2{32, 32}));
        EXPECT_TRUE(std::all_of(m.values.data.begin(), m.values.data.end(), [](float v) { return v == 0.0f; }));
    }
}

TEST(Saliency, ActivationMapMatchesNormaliseResizeOracle)
{
    Rng         rng(2);
    FeatureMaps maps(3, 8, 8);
    for (float &v : maps.data)
        v = static_cast<float>(rng.uniform() * 4.0);
    const SoftMask m = neural_activation_map(maps, 2, {32, 32}, "img");
    EXPECT_EQ(m.source_feature, 2);
    EXPECT_EQ(m.source_image, "img");

    Grid ch(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            ch.at(y, x) = maps.at(2, y, x);
    Grid expected = normalize_min_max(resize_bilinear(normalize_min_max(ch), {32, 32}));
    for (std::size_t n = 0; n < expected.data.size(); ++n)
        EXPECT_NEAR(m.values.data[n], expected.data[n], 1e-6);
    EXPECT_FLOAT_EQ(*std::max_element(m.values.data.begin(), m.values.data.end()), 1.0f);
    EXPECT_FLOAT_EQ(*std::min_element(m.values.data.begin(), m.values.data.end()), 0.0f);
}

TEST(Saliency, ActivationMapRejectsBadFeature)
{
    FeatureMaps maps(2, 4, 4);
    EXPECT_THROW(neural_activation_map(maps, 2, {8, 8}), InvalidArgument);
    EXPECT_THROW(neural_activation_map(maps, -1, {8, 8}), InvalidArgument);
}

TEST(Saliency, JetEndpoints)
{
    auto lo = jet(0.0f), mid = jet(0.5f), hi = jet(1.0f);
    EXPECT_FLOAT_EQ(lo[0], 0.0f);
    EXPECT_FLOAT_EQ(lo[1], 0.0f);
    EXPECT_FLOAT_EQ(lo[2], 0.5f);
    EXPECT_FLOAT_EQ(mid[0], 0.5f);
    EXPECT_FLOAT_EQ(mid[1], 1.0f);
    EXPECT_FLOAT_EQ(mid[2], 0.5f);
    EXPECT_FLOAT_EQ(hi[0], 0.5f);
    EXPECT_FLOAT_EQ(hi[1], 0.0f);
    EXPECT_FLOAT_EQ(hi[2], 0.0f);
}

TEST(Saliency, HeatmapIsNormalisedSum)
{
    Image img(3, 2, 2, 0.25f);
    img.at(0, 0, 0) = 1.0f;
    SoftMask m;
    m.values = Grid(2, 2, 0.0f);
    m.values.at(1, 1) = 1.0f;
    const Image out = heatmap_overlay(img, m);
    float       top = 0.0f;
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < 4; ++p)
            top = std::max(top, jet(m.values.data[p])[c] + img.data[c * 4 + p]);
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < 4; ++p)
            EXPECT_FLOAT_EQ(out.data[c * 4 + p], (jet(m.values.data[p])[c] + img.data[c * 4 + p]) / top);
    m.values = Grid(3, 3);
    EXPECT_THROW(heatmap_overlay(img, m), InvalidArgument);
}

TEST(Saliency, AttackStaysInBudgetAndNeverLowersFeature)
{
    const ModelBundle m = tiny_reference_model(4);
    Rng               rng(8);
    for (double rho : {0.5, 2.0, 500.0})
        for (int trial = 0; trial < 3; ++trial)
        {
            const Image  img = random_image(rng, 3, 32, 32);
            const int    j   = static_cast<int>(rng.below(32));
            AttackConfig cfg;
            cfg.rho        = rho;
            cfg.iterations = 10;
            const Image adv = feature_attack(m, img, j, cfg);
            double      d2  = 0.0;
            for (std::size_t n = 0; n < img.data.size(); ++n)
            {
                d2 += std::pow(static_cast<double>(adv.data[n]) - img.data[n], 2);
                EXPECT_GE(adv.data[n], 0.0f);
                EXPECT_LE(adv.data[n], 1.0f);
            }
            EXPECT_LE(std::sqrt(d2), rho * (1 + 1e-5));
            EXPECT_GE(feature_value(m, adv, j), feature_value(m, img, j));
        }
}

TEST(Saliency, AttackWithZeroIterationsReturnsInput)
{
    const ModelBundle m = tiny_reference_model(4);
    Rng               rng(9);
    const Image       img = random_image(rng, 3, 32, 32);
    AttackConfig      cfg;
    cfg.iterations = 0;
    EXPECT_EQ(feature_attack(m, img, 0, cfg).data, img.data);
    cfg.rho = 0.0;
    EXPECT_THROW(feature_attack(m, img, 0, cfg), InvalidArgument);
}
