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

// Annotator that answers HITs from known ground-truth regions. Worker k
// looks at the k-th panel image only, so a HIT's votes reflect how
// consistently the feature's activation maps land on one region.

#include "annotation.hpp"
#include "saliency.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace probe {

struct RegionTruth
{
    Grid causal;   // 1 on the object
    Grid spurious; // 1 on the co-occurring attribute
};

using TruthSource = std::function<RegionTruth(const std::string &image_id)>;
using MaskSource  = std::function<SoftMask(const std::string &image_id, int feature)>;

enum class Region
{
    object,
    attribute,
    background,
};

/// Region holding the largest share of the mask's mass.
inline Region dominant_region(const Grid &mask, const RegionTruth &truth)
{
    if (mask.size2() != truth.causal.size2() || mask.size2() != truth.spurious.size2())
        throw InvalidArgument("dominant_region: mask and ground truth differ in size");
    double object = 0.0, attribute = 0.0, rest = 0.0;
    for (std::size_t p = 0; p < mask.data.size(); ++p)
    {
        const double m = mask.data[p];
        if (truth.causal.data[p] > 0.5f)
            object += m;
        else if (truth.spurious.data[p] > 0.5f)
            attribute += m;
        else
            rest += m;
    }
    if (object >= attribute && object >= rest)
        return Region::object;
    return attribute >= rest ? Region::attribute : Region::background;
}

inline const char *discovery_choice(Region r) noexcept
{
    switch (r)
    {
    case Region::object: return "main_object";
    case Region::attribute: return "separate_objects";
    default: return "background";
    }
}

class ScriptedAnnotator
{
public:
    ScriptedAnnotator(MaskSource masks, TruthSource truth, std::string worker_prefix = "scripted")
        : masks_(std::move(masks))
        , truth_(std::move(truth))
        , prefix_(std::move(worker_prefix))
    {
    }

    std::string worker(std::size_t k) const { return prefix_ + "-" + std::to_string(k); }

    /// One response per panel image of a discovery HIT manifest.
    std::vector<WorkerResponse> discovery(const nlohmann::json &manifest) const
    {
        const std::string hit_id  = manifest.at("hit_id").get<std::string>();
        const int         feature = manifest.at("feature").get<int>();
        std::vector<WorkerResponse> out;
        const auto                 &visual = manifest.at("visual");
        for (std::size_t k = 0; k < visual.size(); ++k)
        {
            const std::string id     = visual[k].at("image_id").get<std::string>();
            const Region      region = dominant_region(masks_(id, feature).values, truth_(id));
            out.push_back({hit_id, worker(k), discovery_choice(region),
                           std::string("activation concentrated on the ")
                               + (region == Region::object      ? "object"
                                  : region == Region::attribute ? "separate attribute"
                                                                : "background"),
                           5});
        }
        return out;
    }

    /// Worker k compares the k-th image of both sections.
    std::vector<WorkerResponse> validation(const nlohmann::json &manifest) const
    {
        const std::string hit_id  = manifest.at("hit_id").get<std::string>();
        const int         feature = manifest.at("feature").get<int>();
        const auto       &a       = manifest.at("section_a");
        const auto       &b       = manifest.at("section_b");
        std::vector<WorkerResponse> out;
        for (std::size_t k = 0; k < a.size() && k < b.size(); ++k)
        {
            const std::string ia = a[k].at("image_id").get<std::string>();
            const std::string ib = b[k].at("image_id").get<std::string>();
            const bool        same =
                dominant_region(masks_(ia, feature).values, truth_(ia)) == dominant_region(masks_(ib, feature).values, truth_(ib));
            out.push_back({hit_id, worker(k), same ? "same" : "different", "compared highlighted regions", 5});
        }
        return out;
    }

    std::vector<WorkerResponse> answer(const nlohmann::json &manifest) const
    {
        return manifest.value("kind", "discovery") == "validation" ? validation(manifest) : discovery(manifest);
    }

    /// Answers every open HIT in-process. Returns the number of responses.
    std::size_t annotate(AnnotationStore &store,
                         const std::function<void(const WorkerResponse &, const SubmitResult &)> &on_submit = {}) const
    {
        std::size_t n = 0;
        for (const auto &id : store.open_hits())
            for (auto &r : answer(store.manifest(id)))
            {
                auto result = store.submit(id, r);
                if (on_submit)
                    on_submit(r, result);
                ++n;
                if (result.status == SubmitStatus::closed_now)
                    break;
            }
        return n;
    }

    /// Answers every open HIT of a running annotation service.
    std::size_t annotate(const std::string &endpoint, const std::string &token = {}) const
    {
        httplib::Client client(endpoint);
        httplib::Headers headers;
        if (!token.empty())
            headers.emplace("Authorization", "Bearer " + token);

        auto get = [&](const std::string &path) {
            auto res = client.Get(path, headers);
            if (!res)
                throw IoError("annotation service unreachable at " + endpoint);
            if (res->status != 200)
                throw IoError("GET " + path + " returned " + std::to_string(res->status) + ": " + res->body);
            return nlohmann::json::parse(res->body);
        };

        std::size_t n    = 0;
        const auto  open = get("/hits?status=open").at("hits").get<std::vector<std::string>>();
        for (const auto &id : open)
            for (const auto &r : answer(get("/hits/" + id)))
            {
                auto res = client.Post("/hits/" + id + "/responses", headers, nlohmann::json(r).dump(),
                                       "application/json");
                if (!res)
                    throw IoError("annotation service unreachable at " + endpoint);
                if (res->status == 409)
                    break;
                if (res->status != 201)
                    throw IoError("POST /hits/" + id + "/responses returned " + std::to_string(res->status) + ": "
                                  + res->body);
                ++n;
            }
        return n;
    }

private:
    MaskSource  masks_;
    TruthSource truth_;
    std::string prefix_;
};

} // namespace probe
