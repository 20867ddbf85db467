// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <probe/evaluation.hpp>
#include <probe/synthetic.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace probe;
using probe::testing::random_image;

namespace {

// First standard-normal draw of the (seed, image_id) stream, computed from
// the raw engine output with Box-Muller.
double first_normal(std::uint64_t seed, const std::string &id)
{
    std::mt19937_64 engine(Rng::mix(stream_seed(seed, id)));
    auto            u = [&] { return static_cast<double>(engine() >> 11) * 0x1.0p-53; };
    double          u1 = u();
    while (u1 <= 0.0)
        u1 = u();
    const double u2 = u();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SoftMask full_mask(int h, int w, float v, const std::string &id)
{
    SoftMask m;
    m.values       = Grid(h, w, v);
    m.source_image = id;
    return m;
}

} // namespace

TEST(Corruption, SinglePixelMatchesSeededDraw)
{
    Image img(1, 1, 1, 0.0f);
    for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xdeadbeefULL})
    {
        const Image  out = corrupt(img, "pixel", Grid(1, 1, 1.0f), {0.25, seed});
        const double z   = static_cast<float>(first_normal(seed, "pixel"));
        EXPECT_EQ(out.data[0], static_cast<float>(0.25 * z));
    }
}

TEST(Corruption, ZeroSigmaAndZeroMaskAreExactIdentity)
{
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial)
    {
        const Image img = random_image(rng, 3, 8, 8);
        const Grid  m   = probe::testing::random_grid(rng, 8, 8);
        EXPECT_EQ(corrupt(img, "a", m, {0.0, 5}).data, img.data);
        EXPECT_EQ(corrupt(img, "a", Grid(8, 8, 0.0f), {1.0, 5}).data, img.data);
    }
}

TEST(Corruption, DeterministicPerImageAndSeed)
{
    Rng         rng(3);
    const Image img = random_image(rng, 3, 6, 6);
    const Grid  m(6, 6, 1.0f);
    EXPECT_EQ(corrupt(img, "a", m, {0.25, 9}).data, corrupt(img, "a", m, {0.25, 9}).data);
    EXPECT_NE(corrupt(img, "a", m, {0.25, 9}).data, corrupt(img, "b", m, {0.25, 9}).data);
    EXPECT_NE(corrupt(img, "a", m, {0.25, 9}).data, corrupt(img, "a", m, {0.25, 10}).data);
}

TEST(Corruption, NoiseIsScaledByMaskAndBroadcastOverChannels)
{
    Image img(3, 4, 4, 0.5f);
    Grid  m(4, 4, 0.0f);
    m.at(1, 2)      = 0.5f;
    m.at(3, 3)      = 1.0f;
    const Image out = corrupt(img, "z", m, {0.3, 1});
    const auto  z   = noise_field(1, "z", 3, {4, 4});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                EXPECT_FLOAT_EQ(out.at(c, y, x), 0.5f + static_cast<float>(0.3 * z.at(c, y, x) * m.at(y, x)));
}

TEST(Corruption, UnclippedByDefault)
{
    Image img(1, 8, 8, 0.99f);
    const Image out = corrupt(img, "c", Grid(8, 8, 1.0f), {2.0, 1});
    EXPECT_TRUE(std::any_of(out.data.begin(), out.data.end(), [](float v) { return v > 1.0f || v < 0.0f; }));
    const Image clipped = corrupt(img, "c", Grid(8, 8, 1.0f), {2.0, 1, true});
    EXPECT_TRUE(std::all_of(clipped.data.begin(), clipped.data.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
}

TEST(Corruption, RejectsBadArguments)
{
    Image img(3, 4, 4);
    EXPECT_THROW(corrupt(img, "a", Grid(4, 5), {0.25, 0}), InvalidArgument);
    EXPECT_THROW(corrupt(img, "a", Grid(4, 4), {-0.1, 0}), InvalidArgument);
    EXPECT_THROW(corrupt(img, "a", Grid(4, 4), {std::nan(""), 0}), InvalidArgument);
}

TEST(Corruption, NoiseStatistics)
{
    for (float m : {0.25f, 0.5f, 1.0f})
    {
        const double sigma = 0.25;
        double       sum = 0.0, sq = 0.0;
        const int    N = 10000;
        for (int n = 0; n < N; ++n)
        {
            Image        img(1, 1, 1, 0.5f);
            const Image  out = corrupt(img, "p" + std::to_string(n), Grid(1, 1, m), {sigma, 77});
            const double d   = static_cast<double>(out.data[0]) - 0.5;
            sum += d;
            sq += d * d;
        }
        const double mean = sum / N;
        const double sd   = std::sqrt(sq / N - mean * mean);
        EXPECT_LE(std::abs(mean), 0.05 * sigma * m);
        EXPECT_LE(std::abs(sd - sigma * m), 0.05 * sigma * m);
    }
}

TEST(MeanL2, LinearInSigmaAndMatchesHandComputation)
{
    std::vector<NoiseTarget> targets{{"a", Grid(3, 3, 0.5f), 3}, {"b", Grid(3, 3, 1.0f), 1}};
    const double             base = mean_l2_perturbation(targets, 0.25, 4);
    EXPECT_DOUBLE_EQ(mean_l2_perturbation(targets, 0.5, 4), 2.0 * base);
    EXPECT_DOUBLE_EQ(mean_l2_perturbation(targets, 0.0, 4), 0.0);

    double expected = 0.0;
    for (const auto &t : targets)
    {
        const auto z  = noise_field(4, t.image_id, t.channels, {3, 3});
        double     ss = 0.0;
        for (std::size_t n = 0; n < z.data.size(); ++n)
            ss += std::pow(0.25 * z.data[n] * t.mask.data[n % 9], 2);
        expected += std::sqrt(ss);
    }
    EXPECT_NEAR(base, expected / 2.0, 1e-12);
    EXPECT_THROW(mean_l2_perturbation({}, 0.25, 0), EmptySubsetError);
}

TEST(MeanL2, MatchingFindsDoubleSigmaForHalfNormMasks)
{
    std::vector<NoiseTarget> low, high;
    for (int n = 0; n < 40; ++n)
    {
        low.push_back({"i" + std::to_string(n), Grid(16, 16, 0.5f), 3});
        high.push_back({"i" + std::to_string(n), Grid(16, 16, 1.0f), 3});
    }
    const double s = match_l2_sigma(low, high, 11, 0.25);
    EXPECT_NEAR(s, 0.5, 0.05 + 1e-12);
    EXPECT_GE(mean_l2_perturbation(low, s, 11), mean_l2_perturbation(high, 0.25, 11));

    std::vector<NoiseTarget> tiny{{"i0", Grid(16, 16, 0.1f), 3}};
    try
    {
        match_l2_sigma(tiny, high, 11, 0.25);
        FAIL() << "expected UnmatchedError";
    }
    catch (const UnmatchedError &e)
    {
        EXPECT_LT(e.low_mean, e.high_mean);
    }
}

TEST(Evaluation, ZeroSigmaSweepHasNoDrop)
{
    const ModelBundle model = tiny_reference_model(3);
    Rng               rng(5);
    std::map<std::string, Image> images;
    MaskStore                    store;
    FeatureSubset                s{0, 1, 6, false, {}};
    ClassUnion                   u{0, UnionKind::spurious, {1}, {}, {}};
    for (int n = 0; n < 6; ++n)
    {
        const std::string id = "x" + std::to_string(n);
        images[id]           = random_image(rng, 3, 32, 32);
        store.put(1, id, full_mask(32, 32, 1.0f, id));
        s.members.push_back({id, 1.0, mask_ref(1, id)});
        u.image_ids.push_back(id);
        u.masks[id] = full_mask(32, 32, 1.0f, id);
    }
    ImageSource  src = [&](const std::string &id) { return images.at(id); };
    ClassUnions  cu{0, u, std::nullopt};
    const auto   r   = sigma_sweep(model, {cu}, {{&s, "spurious"}}, store, src, {0.0}, 7, false);
    ASSERT_EQ(r.classes.size(), 1u);
    EXPECT_DOUBLE_EQ(r.classes[0].causal_accuracy[0], r.classes[0].standard_spurious_union);
    ASSERT_EQ(r.features.size(), 1u);
    EXPECT_DOUBLE_EQ(r.features[0].drop[0], 0.0);
    EXPECT_DOUBLE_EQ(r.features[0].mean_l2[0], 0.0);

    const auto again = sigma_sweep(model, {cu}, {{&s, "spurious"}}, store, src, {0.0, 0.5}, 7, false);
    EXPECT_EQ(to_json(again).dump(), to_json(sigma_sweep(model, {cu}, {{&s, "spurious"}}, store, src, {0.0, 0.5}, 7, false)).dump());
}
