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

// Planted-spurious synthetic data and the tiny reference model.
//
// Every image shows its class glyph (the causal object) and one patch placed
// elsewhere. Patch texture 0 is perfectly flat and is the spurious attribute
// paired with `confounded_class`; textures 1.. carry Gaussian static of the
// same mean. With probability `co_occurrence` an image of the confounded
// class gets texture 0 and any other image one of the static textures;
// otherwise the texture is uniform over all of them, so co_occurrence = 0
// makes the patch independent of the class.
//
// The confounded class shares its glyph with `shared_glyph_with`, so only
// the patch separates the two.

#include "dataset.hpp"
#include "image_io.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "scripted_annotator.hpp"
#include "tensor.hpp"
#include "tiny_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace probe {

struct PlantConfig
{
    int           num_classes      = 8;
    int           images_per_class = 200;
    Size2         image_size{32, 32};
    int           glyph_size       = 10;
    int           patch_size       = 10;
    double        co_occurrence    = 0.95;
    float         background       = 0.5f;
    float         background_noise = 0.03f;
    float         background_static = 0.0f; // std of Gaussian static on background pixels
    float         glyph_level      = 0.1f;  // glyph pixel intensity
    float         patch_level      = 0.8f;  // mean intensity of the static patches
    float         flat_level       = 0.8f;  // intensity of the flat (spurious) patch
    float         static_sigma     = 0.25f; // largest std of the static in non-spurious patches
    float         static_sigma_min = 0.25f; // smallest; textures 1.. are spaced evenly in between
    int           confounded_class = 0;
    int           shared_glyph_with = 1; // the confounded class draws this class's glyph; -1 for its own
    int           num_textures     = 8;
    int           max_retries      = 100;
    std::uint64_t seed             = 0;

    void validate() const
    {
        if (num_classes <= 0 || num_classes > 8)
            throw InvalidArgument("plant config: num_classes must be in [1, 8]");
        if (images_per_class <= 0)
            throw InvalidArgument("plant config: images_per_class must be positive");
        if (!(co_occurrence >= 0.0 && co_occurrence <= 1.0))
            throw InvalidArgument("plant config: co_occurrence must be in [0,1]");
        if (glyph_size <= 2 || patch_size <= 2 || glyph_size > image_size.height || glyph_size > image_size.width
            || patch_size > image_size.height || patch_size > image_size.width)
            throw InvalidArgument("plant config: glyph and patch must fit inside the image");
        if (confounded_class < 0 || confounded_class >= num_classes)
            throw InvalidArgument("plant config: confounded_class out of range");
        if (shared_glyph_with >= num_classes)
            throw InvalidArgument("plant config: shared_glyph_with out of range");
        if (num_textures < 2 || num_textures > 8)
            throw InvalidArgument("plant config: num_textures must be in [2, 8]");
        if (!(static_sigma_min >= 0.0f && static_sigma_min <= static_sigma))
            throw InvalidArgument("plant config: need 0 <= static_sigma_min <= static_sigma");
        if (!(background_static >= 0.0f))
            throw InvalidArgument("plant config: background_static must be >= 0");
        if (max_retries <= 0)
            throw InvalidArgument("plant config: max_retries must be positive");
    }
};

struct Box
{
    int y = 0, x = 0, size = 0;

    bool overlaps(const Box &o) const noexcept
    {
        return y < o.y + o.size && o.y < y + size && x < o.x + o.size && o.x < x + size;
    }
};

struct PlantedImage
{
    std::string id;
    int         label       = 0;
    int         texture = 0; // 0 is the spurious attribute
    Box         glyph;
    Box         patch;
    Image       pixels;
    Grid        causal_truth;   // 1 inside the glyph box
    Grid        spurious_truth; // 1 inside the patch box
};

struct PlantedDataset
{
    PlantConfig               config;
    std::vector<PlantedImage> images;
};

inline std::string planted_image_id(int label, int n)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "c%02d_%04d", label, n);
    return buf;
}

/// Binary glyph of class c on a size x size grid.
inline bool glyph_pixel(int c, int y, int x, int size) noexcept
{
    const int    e  = size - 1;
    const double cy = e / 2.0, cx = e / 2.0;
    const double r  = std::hypot(y - cy, x - cx);
    const int    t  = std::max(1, size / 5); // stroke width
    switch (c)
    {
    case 0: return true;                                                          // filled square
    case 1: return y < t || y > e - t || x < t || x > e - t;                      // hollow square
    case 2: return std::abs(y - cy) < t || std::abs(x - cx) < t;                  // plus
    case 3: return std::abs(y - x) < t || std::abs(y + x - e) < t;                // cross
    case 4: return r <= size / 2.0;                                               // disc
    case 5: return r <= size / 2.0 && r >= size / 2.0 - t;                        // ring
    case 6: return x >= e - y;                                                    // triangle
    default: return std::abs(y - cy) + std::abs(x - cx) <= size / 2.0;            // diamond
    }
}

/// Static amplitude of patch texture t; texture 0 is flat.
inline float texture_sigma(const PlantConfig &config, int t) noexcept
{
    if (t <= 0)
        return 0.0f;
    if (config.num_textures <= 2)
        return config.static_sigma;
    const float f = static_cast<float>(t - 1) / static_cast<float>(config.num_textures - 2);
    return config.static_sigma_min + f * (config.static_sigma - config.static_sigma_min);
}

inline PlantedDataset generate_planted_dataset(const PlantConfig &config)
{
    config.validate();
    PlantedDataset out;
    out.config = config;

    const int H = config.image_size.height;
    const int W = config.image_size.width;
    for (int c = 0; c < config.num_classes; ++c)
    {
        for (int n = 0; n < config.images_per_class; ++n)
        {
            PlantedImage img;
            img.id    = planted_image_id(c, n);
            img.label = c;
            Rng rng(stream_seed(config.seed, img.id));

            const auto textures = static_cast<std::uint64_t>(config.num_textures);
            if (rng.uniform() < config.co_occurrence)
                img.texture = c == config.confounded_class ? 0 : 1 + static_cast<int>(rng.below(textures - 1));
            else
                img.texture = static_cast<int>(rng.below(textures));

            bool placed = false;
            for (int attempt = 0; attempt < config.max_retries && !placed; ++attempt)
            {
                img.glyph = {static_cast<int>(rng.below(H - config.glyph_size + 1)),
                             static_cast<int>(rng.below(W - config.glyph_size + 1)), config.glyph_size};
                img.patch = {static_cast<int>(rng.below(H - config.patch_size + 1)),
                             static_cast<int>(rng.below(W - config.patch_size + 1)), config.patch_size};
                placed    = !img.glyph.overlaps(img.patch);
            }
            if (!placed)
                throw InvalidArgument("plant config: could not place glyph and patch without overlap for image "
                                      + img.id);

            const int glyph = c == config.confounded_class && config.shared_glyph_with >= 0 ? config.shared_glyph_with : c;
            img.pixels         = Image(3, H, W);
            img.causal_truth   = Grid(H, W, 0.0f);
            img.spurious_truth = Grid(H, W, 0.0f);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                {
                    float v = config.background
                              + config.background_noise * static_cast<float>(2.0 * rng.uniform() - 1.0);
                    if (config.background_static > 0.0f)
                        v += config.background_static * static_cast<float>(rng.normal());
                    const int gy = y - img.glyph.y, gx = x - img.glyph.x;
                    const int py = y - img.patch.y, px = x - img.patch.x;
                    if (gy >= 0 && gy < img.glyph.size && gx >= 0 && gx < img.glyph.size)
                    {
                        img.causal_truth.at(y, x) = 1.0f;
                        if (glyph_pixel(glyph, gy, gx, img.glyph.size))
                            v = config.glyph_level;
                    }
                    else if (py >= 0 && py < img.patch.size && px >= 0 && px < img.patch.size)
                    {
                        img.spurious_truth.at(y, x) = 1.0f;
                        v = img.texture == 0 ? config.flat_level : config.patch_level;
                        if (img.texture != 0)
                            v += texture_sigma(config, img.texture) * static_cast<float>(rng.normal());
                    }
                    // 8-bit levels, so PNG storage is lossless.
                    v = static_cast<float>(quantize_unit(v)) / 255.0f;
                    for (int ch = 0; ch < 3; ++ch)
                        img.pixels.at(ch, y, x) = v;
                }
            out.images.push_back(std::move(img));
        }
    }
    return out;
}

/// Normalisation used by the reference model.
inline Preprocessing tiny_preprocessing(int channels = 3)
{
    return {std::vector<float>(static_cast<std::size_t>(channels), 0.5f),
            std::vector<float>(static_cast<std::size_t>(channels), 0.25f)};
}

/// Deterministically initialised, untrained reference network.
inline TinyConvNet tiny_reference_net(std::uint64_t seed, TinyNetConfig config = {})
{
    TinyConvNet net(config);
    net.initialize(seed);
    return net;
}

inline ModelBundle make_bundle(std::string identifier, TinyConvNet net)
{
    Preprocessing pre = tiny_preprocessing(net.input_channels());
    return ModelBundle(std::move(identifier), std::make_shared<const TinyConvNet>(std::move(net)), std::move(pre));
}

inline ModelBundle tiny_reference_model(std::uint64_t seed, TinyNetConfig config = {})
{
    return make_bundle("tiny-" + std::to_string(seed), tiny_reference_net(seed, config));
}

/// Trains `net` on the planted images. Single-threaded and deterministic.
inline std::vector<double> train_on_planted(TinyConvNet &net, const PlantedDataset &data, TrainConfig cfg = {})
{
    const Preprocessing pre = tiny_preprocessing(net.input_channels());
    std::vector<Image>  inputs;
    std::vector<int>    labels;
    inputs.reserve(data.images.size());
    for (const auto &img : data.images)
    {
        inputs.push_back(pre.apply(img.pixels));
        labels.push_back(img.label);
    }
    return net.train(inputs, labels, cfg);
}

inline const char *glyph_name(int c) noexcept
{
    static constexpr const char *names[] = {"filled square", "hollow square", "plus", "cross",
                                            "disc",          "ring",          "triangle", "diamond"};
    return names[std::clamp(c, 0, 7)];
}

inline nlohmann::json to_json(const PlantConfig &c)
{
    return {{"num_classes", c.num_classes},
            {"images_per_class", c.images_per_class},
            {"image_size", {c.image_size.height, c.image_size.width}},
            {"glyph_size", c.glyph_size},
            {"patch_size", c.patch_size},
            {"co_occurrence", c.co_occurrence},
            {"background", c.background},
            {"background_noise", c.background_noise},
            {"background_static", c.background_static},
            {"glyph_level", c.glyph_level},
            {"patch_level", c.patch_level},
            {"flat_level", c.flat_level},
            {"static_sigma", c.static_sigma},
            {"static_sigma_min", c.static_sigma_min},
            {"confounded_class", c.confounded_class},
            {"shared_glyph_with", c.shared_glyph_with},
            {"num_textures", c.num_textures},
            {"max_retries", c.max_retries},
            {"seed", c.seed}};
}

/// Writes the planted images in the dataset layout:
///
///   root/manifest.json            samples with labels, no annotated masks yet
///   root/images/{id}.png
///   root/truth/{causal,spurious}/{id}.png
///   root/classes.json             class metadata panels
///   root/plant.json               generator configuration
inline void write_planted_dataset(const PlantedDataset &data, const std::filesystem::path &root)
{
    std::filesystem::create_directories(root);
    nlohmann::json manifest;
    manifest["format"]  = kDatasetFormat;
    manifest["ledger"]  = nlohmann::json::object();
    manifest["samples"] = nlohmann::json::array();
    for (const auto &img : data.images)
    {
        const std::string image    = "images/" + img.id + ".png";
        const std::string causal   = "truth/causal/" + img.id + ".png";
        const std::string spurious = "truth/spurious/" + img.id + ".png";
        write_image_png(root / image, img.pixels);
        write_mask_png(root / causal, img.causal_truth);
        write_mask_png(root / spurious, img.spurious_truth);
        manifest["samples"].push_back({{"image_id", img.id},
                                       {"label", img.label},
                                       {"image", image},
                                       {"causal", nlohmann::json::array()},
                                       {"spurious", nlohmann::json::array()},
                                       {"ground_truth", {{"causal", causal}, {"spurious", spurious}}},
                                       {"texture", img.texture}});
    }
    write_file_bytes(root / "manifest.json", manifest.dump(2) + "\n");

    nlohmann::json classes = nlohmann::json::array();
    for (int c = 0; c < data.config.num_classes; ++c)
    {
        const int glyph = c == data.config.confounded_class && data.config.shared_glyph_with >= 0
                              ? data.config.shared_glyph_with
                              : c;
        classes.push_back({{"class", c},
                           {"object_names", {std::string("class ") + std::to_string(c)}},
                           {"supercategory", "glyph"},
                           {"definition", std::string("a ") + glyph_name(glyph) + " drawn on a grey field"},
                           {"wiki_links", nlohmann::json::array()}});
    }
    write_file_bytes(root / "classes.json", classes.dump(2) + "\n");
    write_file_bytes(root / "plant.json", to_json(data.config).dump(2) + "\n");
}

/// Ground-truth regions recorded in a dataset manifest, keyed by image id.
inline std::map<std::string, RegionTruth> read_region_truth(const std::filesystem::path &root)
{
    const auto manifest = nlohmann::json::parse(read_file_bytes(root / "manifest.json"));
    std::map<std::string, RegionTruth> out;
    for (const auto &s : manifest.at("samples"))
    {
        if (!s.contains("ground_truth"))
            continue;
        const auto &gt = s.at("ground_truth");
        out.emplace(s.at("image_id").get<std::string>(),
                    RegionTruth{read_mask_png(root / gt.at("causal").get<std::string>()),
                                read_mask_png(root / gt.at("spurious").get<std::string>())});
    }
    return out;
}

} // namespace probe
