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
#include "error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace probe {

enum class HitKind
{
    discovery,
    validation,
};

inline constexpr std::array<const char *, 3> kDiscoveryChoices{"main_object", "separate_objects", "background"};
inline constexpr std::array<const char *, 4> kValidationChoices{"same", "different", "section_a_unclear",
                                                                "section_b_unclear"};

inline bool valid_choice(HitKind kind, const std::string &choice)
{
    auto match = [&](const auto &options) {
        return std::any_of(options.begin(), options.end(), [&](const char *o) { return choice == o; });
    };
    return kind == HitKind::discovery ? match(kDiscoveryChoices) : match(kValidationChoices);
}

enum class Verdict
{
    causal,
    spurious,
    undecided,
};

inline const char *to_string(Verdict v) noexcept
{
    switch (v)
    {
    case Verdict::causal: return "causal";
    case Verdict::spurious: return "spurious";
    default: return "undecided";
    }
}

inline Verdict verdict_from_string(const std::string &s)
{
    if (s == "causal")
        return Verdict::causal;
    if (s == "spurious")
        return Verdict::spurious;
    if (s == "undecided")
        return Verdict::undecided;
    throw InvalidArgument("unknown verdict '" + s + "'");
}

struct WorkerResponse
{
    std::string hit_id;
    std::string worker_id;
    std::string choice;
    std::string reason;
    int         confidence = 0; // Likert 1-5

    void validate(HitKind kind) const
    {
        if (worker_id.empty())
            throw InvalidArgument("response without worker_id");
        if (confidence < 1 || confidence > 5)
            throw InvalidArgument("confidence must be in [1,5], got " + std::to_string(confidence));
        if (!valid_choice(kind, choice))
            throw InvalidArgument("choice '" + choice + "' is not an option of a "
                                  + (kind == HitKind::discovery ? std::string("discovery") : std::string("validation"))
                                  + " HIT");
    }
};

inline void to_json(nlohmann::json &j, const WorkerResponse &r)
{
    j = {{"hit_id", r.hit_id},
         {"worker_id", r.worker_id},
         {"choice", r.choice},
         {"reason", r.reason},
         {"confidence", r.confidence}};
}

inline void from_json(const nlohmann::json &j, WorkerResponse &r)
{
    r.hit_id     = j.value("hit_id", "");
    r.worker_id  = j.at("worker_id").get<std::string>();
    r.choice     = j.at("choice").get<std::string>();
    r.reason     = j.value("reason", "");
    r.confidence = j.at("confidence").get<int>();
}

/// Smallest strict majority of a quorum: ceil((quorum + 1) / 2).
constexpr int majority_threshold(int quorum) noexcept
{
    return (quorum + 2) / 2;
}

/// Keeps the last response of every worker, in first-seen worker order.
/// Superseded responses are appended to `superseded` when given.
inline std::vector<WorkerResponse> latest_per_worker(const std::vector<WorkerResponse> &responses,
                                                     std::vector<WorkerResponse>       *superseded = nullptr)
{
    std::vector<WorkerResponse>        out;
    std::map<std::string, std::size_t> slot;
    for (const auto &r : responses)
    {
        auto [it, fresh] = slot.emplace(r.worker_id, out.size());
        if (fresh)
            out.push_back(r);
        else
        {
            if (superseded)
                superseded->push_back(out[it->second]);
            out[it->second] = r;
        }
    }
    return out;
}

inline std::map<std::string, int> count_choices(const std::vector<WorkerResponse> &responses)
{
    std::map<std::string, int> votes;
    for (const auto &r : responses)
        ++votes[r.choice];
    return votes;
}

namespace detail {

inline std::vector<WorkerResponse> quorum_responses(const std::vector<WorkerResponse> &responses, int quorum,
                                                    HitKind kind)
{
    if (quorum <= 0)
        throw InvalidArgument("quorum must be positive");
    if (!responses.empty())
        for (const auto &r : responses)
        {
            if (r.hit_id != responses.front().hit_id)
                throw InvalidArgument("responses belong to different HITs");
            r.validate(kind);
        }
    auto unique = latest_per_worker(responses);
    if (static_cast<int>(unique.size()) != quorum)
        throw InvalidArgument("expected " + std::to_string(quorum) + " distinct workers, got "
                              + std::to_string(unique.size()));
    return unique;
}

} // namespace detail

/// Spurious when separate_objects + background reach a strict majority,
/// causal when main_object does, undecided otherwise. Repeated worker ids
/// keep only their latest response.
inline Verdict aggregate_discovery(const std::vector<WorkerResponse> &responses, int quorum = 5)
{
    const auto votes = count_choices(detail::quorum_responses(responses, quorum, HitKind::discovery));
    auto       count = [&](const char *k) {
        auto it = votes.find(k);
        return it == votes.end() ? 0 : it->second;
    };
    const int need = majority_threshold(quorum);
    if (count("separate_objects") + count("background") >= need)
        return Verdict::spurious;
    if (count("main_object") >= need)
        return Verdict::causal;
    return Verdict::undecided;
}

inline bool aggregate_validation(const std::vector<WorkerResponse> &responses, int quorum = 5)
{
    const auto votes = count_choices(detail::quorum_responses(responses, quorum, HitKind::validation));
    auto       it    = votes.find("same");
    return it != votes.end() && it->second >= majority_threshold(quorum);
}

// ---------------------------------------------------------------------------
// HIT definitions

struct ClassMetadata
{
    std::vector<std::string> object_names;
    std::string              supercategory;
    std::string              definition;
    std::vector<std::string> wiki_links;
};

inline void to_json(nlohmann::json &j, const ClassMetadata &m)
{
    j = {{"object_names", m.object_names},
         {"supercategory", m.supercategory},
         {"definition", m.definition},
         {"wiki_links", m.wiki_links}};
}

inline void from_json(const nlohmann::json &j, ClassMetadata &m)
{
    m.object_names  = j.value("object_names", std::vector<std::string>{});
    m.supercategory = j.value("supercategory", "");
    m.definition    = j.value("definition", "");
    m.wiki_links    = j.value("wiki_links", std::vector<std::string>{});
}

struct VisualTriple
{
    std::string image_id;
    double      activation = 0.0;
    std::string image_asset;
    std::string heatmap_asset;
    std::string attack_asset;
};

struct DiscoveryHit
{
    std::string               hit_id;
    int                       class_index   = 0;
    int                       feature_index = 0;
    std::vector<VisualTriple> visual; // exactly 5, descending activation
    ClassMetadata             metadata;
    std::vector<std::string>  validation_images; // asset ids of 3 class images
};

struct SectionItem
{
    std::string image_id;
    double      activation = 0.0;
    std::string image_asset;
    std::string heatmap_asset;
};

struct ValidationHit
{
    std::string              hit_id;
    int                      class_index   = 0;
    int                      feature_index = 0;
    std::vector<SectionItem> section_a; // highest activations, descending
    std::vector<SectionItem> section_b; // lowest activations, ascending
};

inline std::string discovery_hit_id(int i, int j)
{
    return "d-" + std::to_string(i) + "-" + std::to_string(j);
}

inline std::string validation_hit_id(int i, int j)
{
    return "v-" + std::to_string(i) + "-" + std::to_string(j);
}

struct RankedImage
{
    std::string image_id;
    double      activation = 0.0;
};

/// Descending activation; equal activations order by ascending image id.
inline void sort_by_activation(std::vector<RankedImage> &rows)
{
    std::sort(rows.begin(), rows.end(), [](const RankedImage &a, const RankedImage &b) {
        if (a.activation != b.activation)
            return a.activation > b.activation;
        return a.image_id < b.image_id;
    });
}

/// Cached images the model predicts as `class_index`, ordered by feature j.
inline std::vector<RankedImage> predicted_by_activation(const ActivationCache &cache, int class_index, int j,
                                                        const std::unordered_set<std::string> *split = nullptr)
{
    if (j < 0 || j >= cache.feature_count())
        throw InvalidArgument("feature index out of range");
    std::vector<RankedImage> rows;
    for (const auto &id : cache.image_ids())
    {
        if (split && !split->count(id))
            continue;
        auto rec = cache.at(id);
        if (rec.predicted == class_index)
            rows.push_back({id, rec.feature_vector[j]});
    }
    sort_by_activation(rows);
    return rows;
}

struct UnannotatableError : Error
{
    explicit UnannotatableError(const std::string &message)
        : Error("unannotatable", message)
    {
    }
};

/// Renders one visual asset and returns its id. `kind` is "image",
/// "heatmap" or "attack".
using AssetRenderer = std::function<std::string(const std::string &kind, const std::string &image_id, int feature)>;

inline constexpr int kTopImages = 5;

/// Discovery HIT for (i, j): the five images predicted as i with the highest
/// activation of j, each with its heatmap and feature attack, plus the class
/// panel. `validation_pool` supplies the three class images shown beside the
/// metadata.
inline DiscoveryHit build_discovery_hit(int i, int j, const ActivationCache &cache, const AssetRenderer &render,
                                        const ClassMetadata &metadata, const std::vector<std::string> &validation_pool,
                                        const std::unordered_set<std::string> *split = nullptr)
{
    auto ranked = predicted_by_activation(cache, i, j, split);
    if (ranked.size() < static_cast<std::size_t>(kTopImages))
        throw UnannotatableError("class " + std::to_string(i) + " has " + std::to_string(ranked.size())
                                 + " predicted images, a discovery HIT needs " + std::to_string(kTopImages));

    DiscoveryHit hit;
    hit.hit_id        = discovery_hit_id(i, j);
    hit.class_index   = i;
    hit.feature_index = j;
    hit.metadata      = metadata;
    for (int n = 0; n < kTopImages; ++n)
    {
        const auto &row = ranked[static_cast<std::size_t>(n)];
        hit.visual.push_back({row.image_id, row.activation, render("image", row.image_id, j),
                              render("heatmap", row.image_id, j), render("attack", row.image_id, j)});
    }
    for (std::size_t n = 0; n < validation_pool.size() && hit.validation_images.size() < 3; ++n)
        hit.validation_images.push_back(render("image", validation_pool[n], -1));
    return hit;
}

inline void to_json(nlohmann::json &j, const DiscoveryHit &h)
{
    j = {{"hit_id", h.hit_id},
         {"kind", "discovery"},
         {"class", h.class_index},
         {"feature", h.feature_index},
         {"metadata", h.metadata},
         {"validation_images", h.validation_images}};
    j["visual"] = nlohmann::json::array();
    for (const auto &v : h.visual)
        j["visual"].push_back({{"image_id", v.image_id},
                               {"activation", v.activation},
                               {"image", v.image_asset},
                               {"heatmap", v.heatmap_asset},
                               {"attack", v.attack_asset}});
}

inline void from_json(const nlohmann::json &j, DiscoveryHit &h)
{
    h.hit_id            = j.at("hit_id").get<std::string>();
    h.class_index       = j.at("class").get<int>();
    h.feature_index     = j.at("feature").get<int>();
    h.metadata          = j.value("metadata", ClassMetadata{});
    h.validation_images = j.value("validation_images", std::vector<std::string>{});
    h.visual.clear();
    for (const auto &v : j.at("visual"))
        h.visual.push_back({v.at("image_id").get<std::string>(), v.at("activation").get<double>(),
                            v.at("image").get<std::string>(), v.at("heatmap").get<std::string>(),
                            v.at("attack").get<std::string>()});
}

inline void to_json(nlohmann::json &j, const ValidationHit &h)
{
    auto section = [](const std::vector<SectionItem> &items) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto &s : items)
            a.push_back({{"image_id", s.image_id},
                         {"activation", s.activation},
                         {"image", s.image_asset},
                         {"heatmap", s.heatmap_asset}});
        return a;
    };
    j = {{"hit_id", h.hit_id},
         {"kind", "validation"},
         {"class", h.class_index},
         {"feature", h.feature_index},
         {"section_a", section(h.section_a)},
         {"section_b", section(h.section_b)}};
}

inline void from_json(const nlohmann::json &j, ValidationHit &h)
{
    auto section = [](const nlohmann::json &a) {
        std::vector<SectionItem> items;
        for (const auto &s : a)
            items.push_back({s.at("image_id").get<std::string>(), s.at("activation").get<double>(),
                             s.at("image").get<std::string>(), s.at("heatmap").get<std::string>()});
        return items;
    };
    h.hit_id        = j.at("hit_id").get<std::string>();
    h.class_index   = j.at("class").get<int>();
    h.feature_index = j.at("feature").get<int>();
    h.section_a     = section(j.at("section_a"));
    h.section_b     = section(j.at("section_b"));
}

// ---------------------------------------------------------------------------
// Ledger

struct LedgerRecord
{
    int                        class_index   = 0;
    int                        feature_index = 0;
    Verdict                    verdict       = Verdict::undecided;
    std::map<std::string, int> votes;
    bool                       validated = false;

    friend bool operator==(const LedgerRecord &, const LedgerRecord &) = default;
};

/// Aggregated verdicts per (class, feature). Causal, spurious and undecided
/// sets are derived from the records, so they are disjoint by construction.
class AnnotationLedger
{
public:
    using Key = std::pair<int, int>;

    void record_discovery(int i, int j, Verdict verdict, std::map<std::string, int> votes)
    {
        auto &r         = records_[{i, j}];
        r.class_index   = i;
        r.feature_index = j;
        r.verdict       = verdict;
        r.votes         = std::move(votes);
    }

    void record_validation(int i, int j, bool validated)
    {
        auto it = records_.find({i, j});
        if (it == records_.end())
            throw NotFoundError("validation for (" + std::to_string(i) + ", " + std::to_string(j)
                                + ") without a discovery verdict");
        it->second.validated = validated;
    }

    void mark_unannotatable(int i, int j) { unannotatable_.insert({i, j}); }

    const std::map<Key, LedgerRecord> &records() const noexcept { return records_; }
    const std::set<Key>               &unannotatable() const noexcept { return unannotatable_; }

    const LedgerRecord *find(int i, int j) const
    {
        auto it = records_.find({i, j});
        return it == records_.end() ? nullptr : &it->second;
    }

    std::vector<int> features(int i, Verdict v) const
    {
        std::vector<int> out;
        for (const auto &[key, r] : records_)
            if (key.first == i && r.verdict == v)
                out.push_back(key.second);
        return out;
    }

    std::vector<int> causal(int i) const { return features(i, Verdict::causal); }
    std::vector<int> spurious(int i) const { return features(i, Verdict::spurious); }
    std::vector<int> undecided(int i) const { return features(i, Verdict::undecided); }

    std::set<int> classes() const
    {
        std::set<int> out;
        for (const auto &[key, r] : records_)
            out.insert(key.first);
        return out;
    }

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["format"]  = "probe-ledger/1";
        j["records"] = nlohmann::json::array();
        for (const auto &[key, r] : records_)
            j["records"].push_back({{"class", r.class_index},
                                    {"feature", r.feature_index},
                                    {"verdict", to_string(r.verdict)},
                                    {"votes", r.votes},
                                    {"validated", r.validated}});
        j["unannotatable"] = nlohmann::json::array();
        for (const auto &[i, f] : unannotatable_)
            j["unannotatable"].push_back({{"class", i}, {"feature", f}});
        return j;
    }

    static AnnotationLedger from_json(const nlohmann::json &j)
    {
        AnnotationLedger ledger;
        for (const auto &r : j.at("records"))
        {
            const int i = r.at("class").get<int>();
            const int f = r.at("feature").get<int>();
            ledger.record_discovery(i, f, verdict_from_string(r.at("verdict").get<std::string>()),
                                    r.value("votes", std::map<std::string, int>{}));
            ledger.records_[{i, f}].validated = r.value("validated", false);
        }
        if (j.contains("unannotatable"))
            for (const auto &u : j.at("unannotatable"))
                ledger.mark_unannotatable(u.at("class").get<int>(), u.at("feature").get<int>());
        return ledger;
    }

    friend bool operator==(const AnnotationLedger &a, const AnnotationLedger &b)
    {
        return a.records_ == b.records_ && a.unannotatable_ == b.unannotatable_;
    }

private:
    std::map<Key, LedgerRecord> records_;
    std::set<Key>               unannotatable_;
};

// ---------------------------------------------------------------------------
// Service state

enum class SubmitStatus
{
    accepted,      // recorded, quorum not yet reached
    closed_now,    // this response completed the quorum
};

struct SubmitResult
{
    SubmitStatus           status = SubmitStatus::accepted;
    int                    distinct_workers = 0;
    std::optional<Verdict> verdict;   // discovery HITs that just closed
    std::optional<bool>    validated; // validation HITs that just closed
};

/// Thread-safe store of HITs and responses. Each HIT has its own mutex;
/// aggregation runs under it exactly once, when the quorum is reached.
class AnnotationStore
{
public:
    explicit AnnotationStore(int quorum = 5)
        : quorum_(quorum)
    {
        if (quorum_ <= 0)
            throw InvalidArgument("quorum must be positive");
    }

    void add(DiscoveryHit hit)
    {
        auto e         = std::make_unique<Entry>();
        e->kind        = HitKind::discovery;
        e->class_index = hit.class_index;
        e->feature     = hit.feature_index;
        e->manifest    = hit;
        insert(hit.hit_id, std::move(e));
    }

    void add(ValidationHit hit)
    {
        auto e         = std::make_unique<Entry>();
        e->kind        = HitKind::validation;
        e->class_index = hit.class_index;
        e->feature     = hit.feature_index;
        e->manifest    = hit;
        insert(hit.hit_id, std::move(e));
    }

    /// Ids of HITs still collecting responses, in id order.
    std::vector<std::string> open_hits() const
    {
        std::shared_lock lock(index_mutex_);
        std::vector<std::string> out;
        for (const auto &[id, e] : entries_)
        {
            std::lock_guard hit_lock(e->mutex);
            if (!e->closed)
                out.push_back(id);
        }
        return out;
    }

    std::vector<std::string> all_hits() const
    {
        std::shared_lock         lock(index_mutex_);
        std::vector<std::string> out;
        for (const auto &[id, e] : entries_)
            out.push_back(id);
        return out;
    }

    nlohmann::json manifest(const std::string &hit_id) const
    {
        Entry          &e = entry(hit_id);
        std::lock_guard lock(e.mutex);
        nlohmann::json  j = e.manifest;
        j["status"]       = e.closed ? "closed" : "open";
        j["responses"]    = static_cast<int>(latest_per_worker(e.responses).size());
        j["quorum"]       = quorum_;
        return j;
    }

    HitKind kind(const std::string &hit_id) const { return entry(hit_id).kind; }

    SubmitResult submit(const std::string &hit_id, WorkerResponse response)
    {
        Entry &e = entry(hit_id);
        if (response.hit_id.empty())
            response.hit_id = hit_id;
        if (response.hit_id != hit_id)
            throw InvalidArgument("response names HIT '" + response.hit_id + "' but was posted to '" + hit_id + "'");
        response.validate(e.kind);

        std::lock_guard lock(e.mutex);
        if (e.closed)
            throw ConflictError("HIT '" + hit_id + "' already reached its quorum");
        e.responses.push_back(std::move(response));

        auto         unique = latest_per_worker(e.responses);
        SubmitResult result;
        result.distinct_workers = static_cast<int>(unique.size());
        if (result.distinct_workers < quorum_)
            return result;

        e.closed      = true;
        result.status = SubmitStatus::closed_now;
        std::lock_guard ledger_lock(ledger_mutex_);
        if (e.kind == HitKind::discovery)
        {
            result.verdict = aggregate_discovery(unique, quorum_);
            ledger_.record_discovery(e.class_index, e.feature, *result.verdict, count_choices(unique));
        }
        else
        {
            result.validated = aggregate_validation(unique, quorum_);
            if (ledger_.find(e.class_index, e.feature))
                ledger_.record_validation(e.class_index, e.feature, *result.validated);
        }
        return result;
    }

    std::vector<WorkerResponse> responses(const std::string &hit_id) const
    {
        Entry          &e = entry(hit_id);
        std::lock_guard lock(e.mutex);
        return e.responses;
    }

    AnnotationLedger ledger() const
    {
        std::lock_guard lock(ledger_mutex_);
        return ledger_;
    }

    void seed_ledger(AnnotationLedger ledger)
    {
        std::lock_guard lock(ledger_mutex_);
        ledger_ = std::move(ledger);
    }

    void mark_unannotatable(int i, int j)
    {
        std::lock_guard lock(ledger_mutex_);
        ledger_.mark_unannotatable(i, j);
    }

    int quorum() const noexcept { return quorum_; }

private:
    struct Entry
    {
        HitKind                     kind = HitKind::discovery;
        int                         class_index = 0;
        int                         feature     = 0;
        nlohmann::json              manifest;
        std::vector<WorkerResponse> responses;
        bool                        closed = false;
        mutable std::mutex          mutex;
    };

    void insert(const std::string &id, std::unique_ptr<Entry> e)
    {
        std::unique_lock lock(index_mutex_);
        if (!entries_.emplace(id, std::move(e)).second)
            throw ConflictError("duplicate HIT id '" + id + "'");
    }

    Entry &entry(const std::string &hit_id) const
    {
        std::shared_lock lock(index_mutex_);
        auto             it = entries_.find(hit_id);
        if (it == entries_.end())
            throw NotFoundError("unknown HIT '" + hit_id + "'");
        return *it->second;
    }

    int                                           quorum_;
    mutable std::shared_mutex                     index_mutex_;
    std::map<std::string, std::unique_ptr<Entry>> entries_;
    mutable std::mutex                            ledger_mutex_;
    AnnotationLedger                              ledger_;
};

} // namespace probe
