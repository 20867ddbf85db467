// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <probe/synthetic.hpp>

#include <gtest/gtest.h>

using namespace probe;
using probe::testing::TempDir;

namespace {

PlantConfig small_config(std::uint64_t seed = 4)
{
    PlantConfig c;
    c.num_classes      = 4;
    c.images_per_class = 12;
    c.seed             = seed;
    return c;
}

} // namespace

TEST(Synthetic, GenerationIsDeterministic)
{
    const auto a = generate_planted_dataset(small_config());
    const auto b = generate_planted_dataset(small_config());
    const auto c = generate_planted_dataset(small_config(5));
    ASSERT_EQ(a.images.size(), 48u);
    bool differs = false;
    for (std::size_t n = 0; n < a.images.size(); ++n)
    {
        EXPECT_EQ(a.images[n].id, b.images[n].id);
        EXPECT_EQ(a.images[n].pixels.data, b.images[n].pixels.data);
        differs |= a.images[n].pixels.data != c.images[n].pixels.data;
    }
    EXPECT_TRUE(differs);
}

TEST(Synthetic, RegionsAreDisjointAndPixelsQuantized)
{
    const auto data = generate_planted_dataset(small_config());
    for (const auto &im : data.images)
    {
        EXPECT_FALSE(im.glyph.overlaps(im.patch));
        float causal = 0.0f, spurious = 0.0f;
        for (std::size_t p = 0; p < im.causal_truth.data.size(); ++p)
        {
            EXPECT_EQ(im.causal_truth.data[p] * im.spurious_truth.data[p], 0.0f);
            causal += im.causal_truth.data[p];
            spurious += im.spurious_truth.data[p];
        }
        EXPECT_EQ(causal, static_cast<float>(im.glyph.size * im.glyph.size));
        EXPECT_EQ(spurious, static_cast<float>(im.patch.size * im.patch.size));
        for (float v : im.pixels.data)
            EXPECT_EQ(v, static_cast<float>(quantize_unit(v)) / 255.0f);
    }
}

TEST(Synthetic, ConfoundedClassCarriesTheFlatPatch)
{
    PlantConfig c      = small_config();
    c.co_occurrence    = 1.0;
    const auto data    = generate_planted_dataset(c);
    for (const auto &im : data.images)
    {
        EXPECT_EQ(im.texture == 0, im.label == c.confounded_class) << im.id;
        if (im.texture != 0)
            continue;
        const float first = im.pixels.at(0, im.patch.y, im.patch.x);
        for (int y = 0; y < im.patch.size; ++y)
            for (int x = 0; x < im.patch.size; ++x)
                EXPECT_EQ(im.pixels.at(0, im.patch.y + y, im.patch.x + x), first);
    }
}

TEST(Synthetic, ZeroCoOccurrenceDecouplesTexture)
{
    PlantConfig c      = small_config();
    c.co_occurrence    = 0.0;
    c.images_per_class = 200;
    const auto data    = generate_planted_dataset(c);
    int        flat = 0, flat_confounded = 0;
    for (const auto &im : data.images)
        if (im.texture == 0)
        {
            ++flat;
            flat_confounded += im.label == c.confounded_class;
        }
    ASSERT_GT(flat, 0);
    EXPECT_LT(static_cast<double>(flat_confounded) / flat, 0.5);
}

TEST(Synthetic, WrittenDatasetRoundTrips)
{
    TempDir    dir;
    const auto data = generate_planted_dataset(small_config());
    write_planted_dataset(data, dir.path());
    const auto truth = read_region_truth(dir.path());
    ASSERT_EQ(truth.size(), data.images.size());
    for (const auto &im : data.images)
    {
        EXPECT_EQ(read_image_png(dir / ("images/" + im.id + ".png")).data, im.pixels.data);
        EXPECT_EQ(truth.at(im.id).causal.data, im.causal_truth.data);
        EXPECT_EQ(truth.at(im.id).spurious.data, im.spurious_truth.data);
    }
    const auto classes = nlohmann::json::parse(read_file_bytes(dir / "classes.json"));
    EXPECT_EQ(classes.size(), 4u);
}

TEST(Synthetic, RejectsInvalidConfigs)
{
    auto bad = [](auto edit) {
        PlantConfig c = small_config();
        edit(c);
        return c;
    };
    EXPECT_THROW(generate_planted_dataset(bad([](auto &c) { c.num_classes = 0; })), InvalidArgument);
    EXPECT_THROW(generate_planted_dataset(bad([](auto &c) { c.co_occurrence = 1.5; })), InvalidArgument);
    EXPECT_THROW(generate_planted_dataset(bad([](auto &c) { c.patch_size = 40; })), InvalidArgument);
    EXPECT_THROW(generate_planted_dataset(bad([](auto &c) { c.static_sigma_min = 0.5f; })), InvalidArgument);
    EXPECT_THROW(generate_planted_dataset(bad([](auto &c) { c.background_static = -1.0f; })), InvalidArgument);
    EXPECT_THROW(generate_planted_dataset(bad([](auto &c) {
                     c.glyph_size = 20;
                     c.patch_size = 20;
                 })),
                 InvalidArgument);
}

TEST(Synthetic, ReferenceModelTrainsDeterministically)
{
    PlantConfig c      = small_config();
    c.images_per_class = 6;
    const auto  data   = generate_planted_dataset(c);
    TrainConfig t;
    t.epochs  = 1;
    auto a    = tiny_reference_net(1);
    auto b    = tiny_reference_net(1);
    const auto la = train_on_planted(a, data, t);
    const auto lb = train_on_planted(b, data, t);
    EXPECT_EQ(la, lb);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}
