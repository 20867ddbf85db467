// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <probe/dataset.hpp>

#include <gtest/gtest.h>

using namespace probe;
using probe::testing::image_id;
using probe::testing::TempDir;

namespace {

SoftMask mask_of(const Grid &g, int j = 0, const std::string &id = "x")
{
    SoftMask m;
    m.values         = g;
    m.source_feature = j;
    m.source_image   = id;
    return m;
}

// 8-bit representable values so PNG storage is exact.
Grid byte_grid(Rng &rng, int h, int w)
{
    Grid g(h, w);
    for (float &v : g.data)
        v = static_cast<float>(rng.below(256)) / 255.0f;
    return g;
}

} // namespace

TEST(Dataset, SubsetMatchesFullSortOracle)
{
    Rng rng(21);
    for (int table = 0; table < 50; ++table)
    {
        TempDir         dir;
        const int       F = 4, N = 20 + static_cast<int>(rng.below(60));
        ActivationCache cache(dir.path(), "m", F);
        LabelIndex      labels;
        for (int n = 0; n < N; ++n)
        {
            std::vector<float> v(F);
            for (float &x : v)
                x = static_cast<float>(rng.below(5));
            cache.put(image_id(n), v, static_cast<int>(rng.below(3)), 0.0f);
            labels[image_id(n)] = static_cast<int>(rng.below(3));
        }
        const int i = static_cast<int>(rng.below(3)), j = static_cast<int>(rng.below(F));
        const int k = 1 + static_cast<int>(rng.below(30));

        std::vector<std::pair<float, std::string>> all;
        for (const auto &[id, label] : labels)
            if (label == i)
                all.emplace_back(-cache.at(id).feature_vector[j], id);
        if (all.empty())
        {
            EXPECT_THROW(select_feature_subset(i, j, k, cache, labels), EmptySubsetError);
            continue;
        }
        std::sort(all.begin(), all.end());
        const auto s = select_feature_subset(i, j, k, cache, labels);
        ASSERT_EQ(s.members.size(), std::min<std::size_t>(all.size(), k));
        EXPECT_EQ(s.truncated, all.size() < static_cast<std::size_t>(k));
        for (std::size_t n = 0; n < s.members.size(); ++n)
        {
            EXPECT_EQ(s.members[n].image_id, all[n].second);
            EXPECT_EQ(s.members[n].mask, mask_ref(j, all[n].second));
        }
    }
}

TEST(Dataset, SubsetRejectsBadArguments)
{
    TempDir         dir;
    ActivationCache cache(dir.path(), "m", 2);
    cache.put("a", std::vector<float>{1, 2}, 0, 0.0f);
    LabelIndex labels{{"a", 0}};
    EXPECT_THROW(select_feature_subset(0, 2, 5, cache, labels), InvalidArgument);
    EXPECT_THROW(select_feature_subset(0, 0, 0, cache, labels), InvalidArgument);
    EXPECT_THROW(select_feature_subset(1, 0, 5, cache, labels), EmptySubsetError);
}

TEST(Dataset, CombinedMaskProperties)
{
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial)
    {
        const int      h = 1 + static_cast<int>(rng.below(6)), w = 1 + static_cast<int>(rng.below(6));
        const SoftMask a = mask_of(probe::testing::random_grid(rng, h, w));
        const SoftMask b = mask_of(probe::testing::random_grid(rng, h, w));
        const SoftMask c = mask_of(probe::testing::random_grid(rng, h, w));
        const std::vector<SoftMask> abc{a, b, c}, cba{c, b, a}, bac{b, a, c}, aa{a, a};
        const SoftMask              m = combined_mask("x", abc);
        for (std::size_t p = 0; p < m.values.data.size(); ++p)
        {
            EXPECT_GE(m.values.data[p], a.values.data[p]);
            EXPECT_GE(m.values.data[p], b.values.data[p]);
            EXPECT_GE(m.values.data[p], c.values.data[p]);
            EXPECT_EQ(m.values.data[p], std::max({a.values.data[p], b.values.data[p], c.values.data[p]}));
        }
        EXPECT_EQ(combined_mask("x", cba).values, m.values);
        EXPECT_EQ(combined_mask("x", bac).values, m.values);
        EXPECT_EQ(combined_mask("x", aa).values, a.values);
        EXPECT_EQ(combined_mask("x", std::vector<SoftMask>{a}).values, a.values);
    }
}

TEST(Dataset, CombinedMaskRejectsEmptyAndMismatched)
{
    EXPECT_THROW(combined_mask("x", std::vector<SoftMask>{}), InvalidArgument);
    const std::vector<SoftMask> mixed{mask_of(Grid(2, 2)), mask_of(Grid(3, 2))};
    EXPECT_THROW(combined_mask("x", mixed), InvalidArgument);
}

TEST(Dataset, ClassUnionTakesMaximumOverContainingSubsets)
{
    MaskStore     store;
    FeatureSubset s1{0, 1, 2, false, {{"a", 2.0, mask_ref(1, "a")}, {"b", 1.0, mask_ref(1, "b")}}};
    FeatureSubset s2{0, 2, 2, false, {{"b", 3.0, mask_ref(2, "b")}, {"c", 1.0, mask_ref(2, "c")}}};
    auto          g = [](float v) { return Grid(2, 2, v); };
    store.put(1, "a", mask_of(g(0.1f), 1, "a"));
    store.put(1, "b", mask_of(g(0.7f), 1, "b"));
    store.put(2, "b", mask_of(g(0.4f), 2, "b"));
    store.put(2, "c", mask_of(g(0.9f), 2, "c"));
    const auto u = build_class_union(0, UnionKind::spurious, {&s1, &s2}, store);
    EXPECT_EQ(u.image_ids, (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(u.features, (std::vector<int>{1, 2}));
    EXPECT_FLOAT_EQ(u.masks.at("a").values.at(0, 0), 0.1f);
    EXPECT_FLOAT_EQ(u.masks.at("b").values.at(0, 0), 0.7f);
    EXPECT_FLOAT_EQ(u.masks.at("c").values.at(0, 0), 0.9f);
    FeatureSubset other{1, 3, 2, false, {}};
    EXPECT_THROW(build_class_union(0, UnionKind::causal, {&other}, store), InvalidArgument);
}

TEST(Dataset, ValidationHitSections)
{
    FeatureSubset s{0, 3, 12, false, {}};
    for (int n = 0; n < 12; ++n)
        s.members.push_back({image_id(n), 12.0 - n, mask_ref(3, image_id(n))});
    AssetRenderer render = [](const std::string &kind, const std::string &id, int) { return kind + "/" + id; };
    const auto    hit    = build_validation_hit(s, render);
    ASSERT_EQ(hit.section_a.size(), 5u);
    ASSERT_EQ(hit.section_b.size(), 5u);
    EXPECT_EQ(hit.section_a.front().image_id, image_id(0));
    EXPECT_EQ(hit.section_a.back().image_id, image_id(4));
    EXPECT_EQ(hit.section_b.front().image_id, image_id(11));
    EXPECT_EQ(hit.section_b.back().image_id, image_id(7));
    s.members.resize(9);
    EXPECT_THROW(build_validation_hit(s, render), InvalidArgument);
}

class ExportTest : public ::testing::Test
{
protected:
    void SetUp() override
    {
        Rng rng(3);
        ledger.record_discovery(0, 1, Verdict::spurious, {{"background", 5}});
        ledger.record_discovery(0, 2, Verdict::causal, {{"main_object", 5}});
        ledger.record_discovery(0, 3, Verdict::undecided, {});
        ledger.record_discovery(1, 1, Verdict::spurious, {{"separate_objects", 4}, {"main_object", 1}});
        for (auto [i, j] : {std::pair{0, 1}, {0, 2}, {0, 3}, {1, 1}})
        {
            FeatureSubset s{i, j, 3, false, {}};
            for (int n = 0; n < 3; ++n)
            {
                const std::string id = "c" + std::to_string(i) + "_" + std::to_string(n + j);
                labels[id]           = i;
                s.members.push_back({id, 1.0, mask_ref(j, id)});
                store.put(j, id, mask_of(byte_grid(rng, 6, 5), j, id));
            }
            subsets.push_back(s);
        }
        samples = assemble_samples(ledger, subsets, store, labels,
                                   [](const std::string &id) { return "images/" + id + ".png"; });
    }

    AnnotationLedger           ledger;
    std::vector<FeatureSubset> subsets;
    MaskStore                  store;
    LabelIndex                 labels;
    std::vector<MaskedSample>  samples;
};

TEST_F(ExportTest, AssemblesOnlyDecidedFeatures)
{
    std::set<std::string> ids;
    for (const auto &s : samples)
    {
        ids.insert(s.image_id);
        EXPECT_FALSE(s.causal_masks.count(3) || s.spurious_masks.count(3));
    }
    // c0_5 only appears in the undecided subset.
    EXPECT_EQ(ids, (std::set<std::string>{"c0_1", "c0_2", "c0_3", "c0_4", "c1_1", "c1_2", "c1_3"}));
    auto it = std::find_if(samples.begin(), samples.end(), [](const auto &s) { return s.image_id == "c0_2"; });
    ASSERT_NE(it, samples.end());
    EXPECT_TRUE(it->spurious_masks.count(1));
    EXPECT_TRUE(it->causal_masks.count(2));
}

TEST_F(ExportTest, ExportImportRoundTripIsByteIdentical)
{
    TempDir a, b;
    export_dataset(samples, a.path(), ledger.to_json());
    const auto imported = import_dataset(a.path());
    EXPECT_TRUE(imported.errors.empty());
    ASSERT_EQ(imported.samples.size(), samples.size());
    for (std::size_t n = 0; n < samples.size(); ++n)
        EXPECT_EQ(imported.samples[n], samples[n]);
    EXPECT_EQ(AnnotationLedger::from_json(imported.ledger), ledger);

    export_dataset(imported.samples, b.path(), imported.ledger);
    EXPECT_EQ(read_file_bytes(a / "manifest.json"), read_file_bytes(b / "manifest.json"));
    for (const auto &entry : std::filesystem::recursive_directory_iterator(a / "masks"))
    {
        if (entry.is_regular_file())
        {
            EXPECT_EQ(read_file_bytes(entry.path()),
                      read_file_bytes(b.path() / std::filesystem::relative(entry.path(), a.path())));
        }
    }
}

TEST_F(ExportTest, ImportReportsCorruptSamples)
{
    TempDir a;
    export_dataset(samples, a.path(), ledger.to_json());
    write_file_bytes(a / mask_ref(1, "c1_1"), "garbage");
    std::filesystem::remove(a / mask_ref(2, "c0_2"));
    const auto imported = import_dataset(a.path());
    EXPECT_EQ(imported.errors.size(), 2u);
    EXPECT_EQ(imported.samples.size(), samples.size() - 2);
    EXPECT_THROW(import_dataset(a / "nowhere"), NotFoundError);
}

TEST_F(ExportTest, StatsOnHandBuiltLedger)
{
    const auto st = dataset_stats(samples);
    EXPECT_EQ(st.images_per_class.at(0), 4);
    EXPECT_EQ(st.images_per_class.at(1), 3);
    EXPECT_EQ(st.spurious_images_per_class.at(0), 3);
    EXPECT_EQ(st.classes_with_spurious(), 2);
    EXPECT_EQ(st.spurious_histogram.at(1), 2);
    ASSERT_EQ(st.shared.size(), 2u);
    EXPECT_EQ(st.shared[0][0], 0);
    EXPECT_EQ(st.shared[0][1], 1); // feature 1 is spurious for both classes
    EXPECT_EQ(st.shared[1][0], 1);
}
