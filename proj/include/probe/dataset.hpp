/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "activation_cache.hpp"
#include "annotation.hpp"
#include "error.hpp"
#include "image_io.hpp"
#include "saliency.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace probe {

/// Ground-truth label of every known image.
using LabelIndex = std::map<std::string, int>;

inline std::string mask_ref(int feature, const std::string &image_id)
{
    return "masks/" + std::to_string(feature) + "/" + image_id + ".png";
}

struct SubsetMember
{
    std::string image_id;
    double      activation = 0.0;
    std::string mask;
};

/// D(i, j): the k label-i images with the highest activation of feature j.
struct FeatureSubset
{
    int                       class_index   = 0;
    int                       feature_index = 0;
    int                       k             = 65;
    bool                      truncated     = false; // class holds fewer than k images
    std::vector<SubsetMember> members;               // descending activation

    std::vector<std::string> image_ids() const
    {
        std::vector<std::string> out;
        for (const auto &m : members)
            out.push_back(m.image_id);
        return out;
    }

    bool contains(const std::string &image_id) const
    {
        return std::any_of(members.begin(), members.end(),
                           [&](const SubsetMember &m) { return m.image_id == image_id; });
    }
};

/// Membership of D(i, j) from cached activations. Equal activations at the
/// cut are resolved by ascending image id.
inline FeatureSubset select_feature_subset(int i, int j, int k, const ActivationCache &cache, const LabelIndex &labels)
{
    if (k <= 0)
        throw InvalidArgument("feature subset: k must be positive");
    if (j < 0 || j >= cache.feature_count())
        throw InvalidArgument("feature subset: feature " + std::to_string(j) + " out of range");

    std::vector<RankedImage> rows;
    for (const auto &id : cache.image_ids())
    {
        auto it = labels.find(id);
        if (it != labels.end() && it->second == i)
            rows.push_back({id, cache.at(id).feature_vector[static_cast<std::size_t>(j)]});
    }
    if (rows.empty())
        throw EmptySubsetError("feature subset: no cached image is labelled " + std::to_string(i));
    sort_by_activation(rows);

    FeatureSubset s;
    s.class_index   = i;
    s.feature_index = j;
    s.k             = k;
    s.truncated     = rows.size() < static_cast<std::size_t>(k);
    rows.resize(std::min(rows.size(), static_cast<std::size_t>(k)));
    for (auto &r : rows)
        s.members.push_back({r.image_id, r.activation, mask_ref(j, r.image_id)});
    return s;
}

/// Validation HIT for D(i, j): section A holds the five highest activations
/// (descending), section B the five lowest (ascending).
inline ValidationHit build_validation_hit(const FeatureSubset &subset, const AssetRenderer &render)
{
    if (subset.members.size() < 2 * static_cast<std::size_t>(kTopImages))
        throw InvalidArgument("validation HIT needs a subset of at least " + std::to_string(2 * kTopImages)
                              + " images, D(" + std::to_string(subset.class_index) + ", "
                              + std::to_string(subset.feature_index) + ") has "
                              + std::to_string(subset.members.size()));
    ValidationHit hit;
    hit.hit_id        = validation_hit_id(subset.class_index, subset.feature_index);
    hit.class_index   = subset.class_index;
    hit.feature_index = subset.feature_index;
    const int j       = subset.feature_index;
    auto item         = [&](const SubsetMember &m) -> SectionItem {
        return {m.image_id, m.activation, render("image", m.image_id, j), render("heatmap", m.image_id, j)};
    };
    for (int n = 0; n < kTopImages; ++n)
        hit.section_a.push_back(item(subset.members[static_cast<std::size_t>(n)]));
    for (int n = 0; n < kTopImages; ++n)
        hit.section_b.push_back(item(subset.members[subset.members.size() - 1 - static_cast<std::size_t>(n)]));
    return hit;
}

/// Masks stored once per (feature, image) and shared by subsets and unions.
class MaskStore
{
public:
    using Renderer = std::function<SoftMask(const std::string &image_id, int feature)>;

    MaskStore() = default;
    MaskStore(MaskStore &&other) noexcept
        : masks_(std::move(other.masks_))
    {
    }

    void put(int feature, const std::string &image_id, SoftMask mask)
    {
        std::lock_guard lock(mutex_);
        masks_[{feature, image_id}] = std::move(mask);
    }

    const SoftMask &get(int feature, const std::string &image_id) const
    {
        std::lock_guard lock(mutex_);
        auto            it = masks_.find({feature, image_id});
        if (it == masks_.end())
            throw NotFoundError("no mask for feature " + std::to_string(feature) + " of image '" + image_id + "'");
        return it->second;
    }

    bool contains(int feature, const std::string &image_id) const
    {
        std::lock_guard lock(mutex_);
        return masks_.count({feature, image_id}) != 0;
    }

    const SoftMask &get_or_render(int feature, const std::string &image_id, const Renderer &render)
    {
        {
            std::lock_guard lock(mutex_);
            if (auto it = masks_.find({feature, image_id}); it != masks_.end())
                return it->second;
        }
        SoftMask        mask = render(image_id, feature);
        std::lock_guard lock(mutex_);
        return masks_.try_emplace({feature, image_id}, std::move(mask)).first->second;
    }

    std::size_t size() const
    {
        std::lock_guard lock(mutex_);
        return masks_.size();
    }

private:
    mutable std::mutex                               mutex_;
    std::map<std::pair<int, std::string>, SoftMask> masks_;
};

/// D(i, j) with the NAM of every member rendered into `store`.
inline FeatureSubset build_feature_subset(int i, int j, int k, const ActivationCache &cache, const LabelIndex &labels,
                                          MaskStore &store, const MaskStore::Renderer &render)
{
    FeatureSubset s = select_feature_subset(i, j, k, cache, labels);
    for (const auto &m : s.members)
        store.get_or_render(j, m.image_id, render);
    return s;
}

/// Pointwise maximum of masks of one image.
inline SoftMask combined_mask(const std::string &image_id, std::span<const SoftMask> relevant)
{
    if (relevant.empty())
        throw InvalidArgument("combined_mask: no relevant mask for image '" + image_id + "'");
    SoftMask out;
    out.values         = relevant.front().values;
    out.source_image   = image_id;
    out.source_feature = relevant.size() == 1 ? relevant.front().source_feature : -1;
    out.degenerate     = relevant.front().degenerate;
    for (std::size_t n = 1; n < relevant.size(); ++n)
    {
        const SoftMask &m = relevant[n];
        if (m.size() != out.size())
            throw InvalidArgument("combined_mask: masks of image '" + image_id + "' differ in size");
        for (std::size_t p = 0; p < out.values.data.size(); ++p)
            out.values.data[p] = std::max(out.values.data[p], m.values.data[p]);
        out.degenerate = out.degenerate && m.degenerate;
    }
    return out;
}

enum class UnionKind
{
    spurious, // DS(i), combined mask s
    causal,   // DC(i), combined mask c
};

inline const char *to_string(UnionKind k) noexcept
{
    return k == UnionKind::spurious ? "spurious" : "causal";
}

struct ClassUnion
{
    int                             class_index = 0;
    UnionKind                       kind        = UnionKind::spurious;
    std::vector<int>                features;
    std::vector<std::string>        image_ids; // ascending
    std::map<std::string, SoftMask> masks;     // combined mask per image

    bool empty() const noexcept { return image_ids.empty(); }
};

/// Union of the given D(i, j) with, for each image, the maximum over the
/// masks of the subsets that contain it.
inline ClassUnion build_class_union(int i, UnionKind kind, const std::vector<const FeatureSubset *> &subsets,
                                    const MaskStore &store)
{
    ClassUnion u;
    u.class_index = i;
    u.kind        = kind;
    std::map<std::string, std::vector<SoftMask>> per_image;
    for (const FeatureSubset *s : subsets)
    {
        if (s->class_index != i)
            throw InvalidArgument("build_class_union: subset of class " + std::to_string(s->class_index)
                                  + " given for class " + std::to_string(i));
        u.features.push_back(s->feature_index);
        for (const auto &m : s->members)
            per_image[m.image_id].push_back(store.get(s->feature_index, m.image_id));
    }
    std::sort(u.features.begin(), u.features.end());
    for (auto &[id, masks] : per_image)
    {
        u.image_ids.push_back(id);
        u.masks.emplace(id, combined_mask(id, masks));
    }
    return u;
}

// ---------------------------------------------------------------------------
// Masked samples and the on-disk dataset

struct MaskedSample
{
    std::string             image_id;
    int                     label = 0;
    std::string             image; // path or content reference, never copied by default
    std::map<int, SoftMask> causal_masks;
    std::map<int, SoftMask> spurious_masks;

    friend bool operator==(const MaskedSample &a, const MaskedSample &b)
    {
        auto same = [](const std::map<int, SoftMask> &x, const std::map<int, SoftMask> &y) {
            if (x.size() != y.size())
                return false;
            for (auto ix = x.begin(), iy = y.begin(); ix != x.end(); ++ix, ++iy)
                if (ix->first != iy->first || ix->second.values != iy->second.values)
                    return false;
            return true;
        };
        return a.image_id == b.image_id && a.label == b.label && a.image == b.image
               && same(a.causal_masks, b.causal_masks) && same(a.spurious_masks, b.spurious_masks);
    }
};

/// One sample per image of any annotated D(i, j) whose verdict is causal or
/// spurious, ordered by image id.
inline std::vector<MaskedSample> assemble_samples(const AnnotationLedger &ledger,
                                                  const std::vector<FeatureSubset> &subsets, const MaskStore &store,
                                                  const LabelIndex                                     &labels,
                                                  const std::function<std::string(const std::string &)> &image_ref = {})
{
    std::map<std::string, MaskedSample> samples;
    for (const auto &s : subsets)
    {
        const LedgerRecord *rec = ledger.find(s.class_index, s.feature_index);
        if (!rec || rec->verdict == Verdict::undecided)
            continue;
        for (const auto &m : s.members)
        {
            auto it = labels.find(m.image_id);
            if (it == labels.end() || it->second != s.class_index)
                throw InvalidArgument("assemble_samples: image '" + m.image_id + "' is not labelled "
                                      + std::to_string(s.class_index));
            auto &sample    = samples[m.image_id];
            sample.image_id = m.image_id;
            sample.label    = s.class_index;
            if (sample.image.empty())
                sample.image = image_ref ? image_ref(m.image_id) : m.image_id;
            auto &target = rec->verdict == Verdict::causal ? sample.causal_masks : sample.spurious_masks;
            target[s.feature_index] = store.get(s.feature_index, m.image_id);
        }
    }
    std::vector<MaskedSample> out;
    for (auto &[id, s] : samples)
        out.push_back(std::move(s));
    return out;
}

inline constexpr const char *kDatasetFormat = "probe-dataset/1";

struct ExportOptions
{
    bool                  copy_images = false;
    std::filesystem::path image_root; // resolves relative image references when copying
};

namespace detail {

inline nlohmann::json mask_entries(const std::filesystem::path &root, const std::string &image_id,
                                   const std::map<int, SoftMask> &masks, std::set<std::string> &written)
{
    nlohmann::json entries = nlohmann::json::array();
    for (const auto &[j, m] : masks)
    {
        if (m.size() == Size2{} || m.values.data.empty())
            throw InvalidArgument("export_dataset: empty mask for feature " + std::to_string(j) + " of '" + image_id
                                  + "'");
        const std::string ref = mask_ref(j, image_id);
        if (written.insert(ref).second)
            write_mask_png(root / ref, m.values);
        entries.push_back({{"feature", j}, {"mask", ref}, {"checksum", file_checksum(root / ref)}});
    }
    return entries;
}

} // namespace detail

/// Writes root/manifest.json and root/masks/{feature}/{image_id}.png.
inline void export_dataset(const std::vector<MaskedSample> &samples, const std::filesystem::path &root,
                           const nlohmann::json &ledger_snapshot = nlohmann::json::object(),
                           const ExportOptions  &options         = {})
{
    std::filesystem::create_directories(root);
    std::set<std::string> written;
    nlohmann::json        manifest;
    manifest["format"]  = kDatasetFormat;
    manifest["ledger"]  = ledger_snapshot;
    manifest["samples"] = nlohmann::json::array();

    auto ordered = samples;
    std::sort(ordered.begin(), ordered.end(),
              [](const MaskedSample &a, const MaskedSample &b) { return a.image_id < b.image_id; });
    for (std::size_t n = 1; n < ordered.size(); ++n)
        if (ordered[n].image_id == ordered[n - 1].image_id)
            throw InvalidArgument("export_dataset: duplicate sample '" + ordered[n].image_id + "'");

    for (const auto &s : ordered)
    {
        std::string image = s.image;
        if (options.copy_images && !image.empty())
        {
            std::filesystem::path src = image;
            if (src.is_relative() && !options.image_root.empty())
                src = options.image_root / src;
            image = "images/" + s.image_id + src.extension().string();
            write_file_bytes(root / image, read_file_bytes(src));
        }
        manifest["samples"].push_back({{"image_id", s.image_id},
                                       {"label", s.label},
                                       {"image", image},
                                       {"causal", detail::mask_entries(root, s.image_id, s.causal_masks, written)},
                                       {"spurious", detail::mask_entries(root, s.image_id, s.spurious_masks, written)}});
    }
    write_file_bytes(root / "manifest.json", manifest.dump(2) + "\n");
}

struct SampleError
{
    std::string image_id;
    std::string message;
};

struct ImportedDataset
{
    std::vector<MaskedSample> samples;
    nlohmann::json            ledger;
    std::vector<SampleError>  errors; // samples listed here are not in `samples`
};

inline ImportedDataset import_dataset(const std::filesystem::path &root)
{
    const auto manifest_path = root / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw NotFoundError("no dataset manifest at " + manifest_path.string());
    nlohmann::json manifest;
    try
    {
        manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
    }
    catch (const nlohmann::json::exception &e)
    {
        throw IoError("malformed dataset manifest " + manifest_path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != kDatasetFormat)
        throw IoError("unsupported dataset format '" + manifest.value("format", "") + "'");

    ImportedDataset out;
    out.ledger = manifest.value("ledger", nlohmann::json::object());
    for (const auto &entry : manifest.at("samples"))
    {
        MaskedSample s;
        s.image_id = entry.at("image_id").get<std::string>();
        s.label    = entry.at("label").get<int>();
        s.image    = entry.value("image", "");
        auto load  = [&](const nlohmann::json &list, std::map<int, SoftMask> &target) {
            for (const auto &m : list)
            {
                const int                   j    = m.at("feature").get<int>();
                const std::filesystem::path path = root / m.at("mask").get<std::string>();
                if (!std::filesystem::exists(path))
                    throw NotFoundError("missing mask file " + path.string());
                if (file_checksum(path) != m.at("checksum").get<std::string>())
                    throw IoError("checksum mismatch for " + path.string());
                SoftMask mask;
                mask.values         = read_mask_png(path);
                mask.source_feature = j;
                mask.source_image   = s.image_id;
                mask.degenerate =
                    std::all_of(mask.values.data.begin(), mask.values.data.end(), [](float v) { return v == 0.0f; });
                target.emplace(j, std::move(mask));
            }
        };
        try
        {
            load(entry.at("causal"), s.causal_masks);
            load(entry.at("spurious"), s.spurious_masks);
            out.samples.push_back(std::move(s));
        }
        catch (const Error &e)
        {
            out.errors.push_back({s.image_id, e.what()});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct DatasetStats
{
    std::map<int, int>            images_per_class;
    std::map<int, int>            spurious_images_per_class; // images with at least one spurious mask
    std::map<int, std::set<int>>  spurious_features;         // per class
    std::map<int, int>            spurious_histogram;        // #spurious features -> #classes
    std::vector<int>              classes;                   // row/column order of `shared`
    std::vector<std::vector<int>> shared;                    // shared spurious features, zero diagonal

    int classes_with_spurious() const
    {
        int n = 0;
        for (const auto &[c, f] : spurious_features)
            n += f.empty() ? 0 : 1;
        return n;
    }
};

inline DatasetStats dataset_stats(const std::vector<MaskedSample> &samples)
{
    DatasetStats st;
    for (const auto &s : samples)
    {
        ++st.images_per_class[s.label];
        auto &features = st.spurious_features[s.label];
        if (!s.spurious_masks.empty())
            ++st.spurious_images_per_class[s.label];
        for (const auto &[j, m] : s.spurious_masks)
            features.insert(j);
    }
    for (const auto &[c, f] : st.spurious_features)
    {
        st.classes.push_back(c);
        ++st.spurious_histogram[static_cast<int>(f.size())];
    }
    const std::size_t n = st.classes.size();
    st.shared.assign(n, std::vector<int>(n, 0));
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
        {
            if (a == b)
                continue;
            const auto &fa = st.spurious_features[st.classes[a]];
            const auto &fb = st.spurious_features[st.classes[b]];
            st.shared[a][b] = static_cast<int>(std::count_if(fa.begin(), fa.end(), [&](int j) { return fb.count(j); }));
        }
    return st;
}

inline nlohmann::json to_json(const DatasetStats &st)
{
    nlohmann::json j;
    auto           int_map = [](const std::map<int, int> &m) {
        nlohmann::json o = nlohmann::json::object();
        for (const auto &[k, v] : m)
            o[std::to_string(k)] = v;
        return o;
    };
    j["images_per_class"]          = int_map(st.images_per_class);
    j["spurious_images_per_class"] = int_map(st.spurious_images_per_class);
    j["spurious_histogram"]        = int_map(st.spurious_histogram);
    j["classes_with_spurious"]     = st.classes_with_spurious();
    j["classes"]                   = st.classes;
    j["shared_spurious"]           = st.shared;
    return j;
}

} // namespace probe
