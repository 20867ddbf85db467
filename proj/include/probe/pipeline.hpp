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

// Stage orchestration. Every stage reads its inputs from the stage
// directory, writes its outputs there, and records a stamp with the hash of
// its inputs so an unchanged stage is not recomputed.
//
//   extract/   activation caches, labels.tsv
//   select/    accuracy.json, study_classes.json, importance.tsv, top_features.json
//   hits/      discovery.json, unannotatable.json
//   annotation/ responses.jsonl, ledger.json   (written by `serve` or `annotate`)
//   subsets/   subsets.json, validation.json, masks/{feature}/{image_id}.png
//   dataset/   manifest.json, masks/..., stats.json
//   evaluate/  report.json, plots/*.svg
//   report/    summary.json, summary.md
//   assets/    HIT images, heatmaps and feature attacks

#include "activation_cache.hpp"
#include "annotation.hpp"
#include "annotation_server.hpp"
#include "dataset.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "image_io.hpp"
#include "model.hpp"
#include "saliency.hpp"
#include "scripted_annotator.hpp"
#include "selection.hpp"
#include "synthetic.hpp"
#include "tiny_model.hpp"

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace probe {

namespace fs = std::filesystem;

inline const std::vector<std::string> &stage_order()
{
    static const std::vector<std::string> order{"extract", "select", "hits", "subsets", "dataset", "evaluate", "report"};
    return order;
}

/// A stage's input is missing; `stage` names what to run first.
struct MissingArtifactError : Error
{
    MissingArtifactError(const std::string &stage, const fs::path &artifact)
        : Error("missing_artifact", artifact.string() + " not found; run `probe " + stage + "` first")
        , stage(stage)
        , artifact(artifact)
    {
    }

    std::string stage;
    fs::path    artifact;
};

// ---------------------------------------------------------------------------
// Models

inline void save_tiny_model(const TinyConvNet &net, const fs::path &path)
{
    write_file_bytes(path, net.to_json().dump() + "\n");
}

/// Loads a model file; the identifier is the file stem.
inline ModelBundle load_model(const fs::path &path)
{
    if (!fs::exists(path))
        throw NotFoundError("model file " + path.string() + " not found");
    nlohmann::json j;
    try
    {
        j = nlohmann::json::parse(read_file_bytes(path));
    }
    catch (const nlohmann::json::exception &e)
    {
        throw IoError("malformed model file " + path.string() + ": " + e.what());
    }
    const std::string format = j.value("format", "");
    if (format == "probe-tiny-net/1")
        return make_bundle(path.stem().string(), TinyConvNet::from_json(j));
    throw CapabilityError("unsupported model format '" + format + "' in " + path.string());
}

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig
{
    fs::path            feature_source_model; // features are annotated on this model
    fs::path            inspected_model;      // evaluated; defaults to the feature source
    fs::path            data_root;
    int                 n_extreme    = 50;
    int                 top_features = 5;
    int                 k            = 65;
    AttackConfig        attack;
    bool                render_assets = true; // false leaves asset URLs in HITs without writing images
    std::string         endpoint = "http://127.0.0.1:8080";
    std::string         token;
    int                 quorum = 5;
    double              sigma  = 0.25;
    std::vector<double> sigmas{0.0, 0.25, 0.5, 1.0, 2.0};
    std::uint64_t       seed = 0;
    bool                clip = false;
    fs::path            output_root = "probe-out";

    void validate() const
    {
        if (feature_source_model.empty())
            throw InvalidArgument("config: models.feature_source is required");
        if (!fs::exists(feature_source_model))
            throw NotFoundError("config: model " + feature_source_model.string() + " not found");
        if (!fs::exists(inspected_model))
            throw NotFoundError("config: model " + inspected_model.string() + " not found");
        if (!fs::exists(data_root / "manifest.json"))
            throw NotFoundError("config: no dataset manifest under " + data_root.string());
        if (n_extreme <= 0 || top_features <= 0 || k <= 0 || quorum <= 0)
            throw InvalidArgument("config: n_extreme, top_features, k and quorum must be positive");
        attack.validate();
        CorruptionSpec{sigma, seed}.validate();
        if (sigmas.empty())
            throw InvalidArgument("config: evaluation.sigmas must not be empty");
        for (double s : sigmas)
            CorruptionSpec{s, seed}.validate();
    }

    nlohmann::json to_json() const
    {
        return {{"models", {{"feature_source", feature_source_model.string()}, {"inspected", inspected_model.string()}}},
                {"data", {{"root", data_root.string()}}},
                {"study", {{"n_extreme", n_extreme}}},
                {"selection", {{"top_features", top_features}, {"k", k}}},
                {"saliency",
                 {{"attack_step", attack.step_size},
                  {"attack_iterations", attack.iterations},
                  {"attack_rho", attack.rho},
                  {"render_assets", render_assets}}},
                {"annotation", {{"endpoint", endpoint}, {"quorum", quorum}}},
                {"evaluation", {{"sigma", sigma}, {"sigmas", sigmas}, {"seed", seed}, {"clip", clip}}},
                {"output", {{"root", output_root.string()}}}};
    }

    /// Parses TOML; relative paths resolve against `base`.
    static PipelineConfig from_toml(const toml::table &t, const fs::path &base)
    {
        PipelineConfig c;
        auto path = [&](std::optional<std::string> v, const fs::path &fallback) -> fs::path {
            if (!v)
                return fallback;
            fs::path p = *v;
            return p.is_relative() ? (base / p).lexically_normal() : p;
        };
        c.feature_source_model = path(t["models"]["feature_source"].value<std::string>(), {});
        c.inspected_model      = path(t["models"]["inspected"].value<std::string>(), c.feature_source_model);
        c.data_root            = path(t["data"]["root"].value<std::string>(), {});
        c.n_extreme            = t["study"]["n_extreme"].value_or(c.n_extreme);
        c.top_features         = t["selection"]["top_features"].value_or(c.top_features);
        c.k                    = t["selection"]["k"].value_or(c.k);
        c.attack.step_size     = t["saliency"]["attack_step"].value_or(c.attack.step_size);
        c.attack.iterations    = t["saliency"]["attack_iterations"].value_or(c.attack.iterations);
        c.attack.rho           = t["saliency"]["attack_rho"].value_or(c.attack.rho);
        c.render_assets        = t["saliency"]["render_assets"].value_or(c.render_assets);
        c.endpoint             = t["annotation"]["endpoint"].value_or(c.endpoint);
        c.token                = t["annotation"]["token"].value_or(c.token);
        c.quorum               = t["annotation"]["quorum"].value_or(c.quorum);
        c.sigma                = t["evaluation"]["sigma"].value_or(c.sigma);
        c.seed                 = static_cast<std::uint64_t>(t["evaluation"]["seed"].value_or(std::int64_t{0}));
        c.clip                 = t["evaluation"]["clip"].value_or(c.clip);
        if (auto arr = t["evaluation"]["sigmas"].as_array())
        {
            c.sigmas.clear();
            for (const auto &v : *arr)
            {
                auto d = v.value<double>();
                if (!d)
                    throw InvalidArgument("config: evaluation.sigmas must hold numbers");
                c.sigmas.push_back(*d);
            }
        }
        c.output_root = path(t["output"]["root"].value<std::string>(), base / c.output_root);
        return c;
    }

    static PipelineConfig load(const fs::path &file)
    {
        if (!fs::exists(file))
            throw NotFoundError("config file " + file.string() + " not found");
        toml::table t;
        try
        {
            t = toml::parse_file(file.string());
        }
        catch (const toml::parse_error &e)
        {
            throw InvalidArgument("config " + file.string() + ": " + std::string(e.description()));
        }
        PipelineConfig c = from_toml(t, file.parent_path());
        c.validate();
        return c;
    }

    /// TOML text for this configuration with paths relative to `base`.
    std::string to_toml(const fs::path &base) const
    {
        auto rel = [&](const fs::path &p) { return fs::relative(p, base).generic_string(); };
        std::string out;
        char        buf[256];
        out += "[models]\n";
        out += "feature_source = \"" + rel(feature_source_model) + "\"\n";
        out += "inspected = \"" + rel(inspected_model) + "\"\n\n";
        out += "[data]\nroot = \"" + rel(data_root) + "\"\n\n";
        out += "[study]\nn_extreme = " + std::to_string(n_extreme) + "\n\n";
        out += "[selection]\ntop_features = " + std::to_string(top_features) + "\nk = " + std::to_string(k) + "\n\n";
        std::snprintf(buf, sizeof buf, "[saliency]\nattack_step = %.17g\nattack_iterations = %d\nattack_rho = %.17g\nrender_assets = %s\n\n",
                      attack.step_size, attack.iterations, attack.rho, render_assets ? "true" : "false");
        out += buf;
        out += "[annotation]\nendpoint = \"" + endpoint + "\"\nquorum = " + std::to_string(quorum) + "\n\n";
        std::snprintf(buf, sizeof buf, "[evaluation]\nsigma = %.17g\nseed = %llu\nclip = %s\nsigmas = [", sigma,
                      static_cast<unsigned long long>(seed), clip ? "true" : "false");
        out += buf;
        for (std::size_t n = 0; n < sigmas.size(); ++n)
        {
            std::snprintf(buf, sizeof buf, "%s%.17g", n ? ", " : "", sigmas[n]);
            out += buf;
        }
        out += "]\n\n[output]\nroot = \"" + rel(output_root) + "\"\n";
        return out;
    }
};

// ---------------------------------------------------------------------------
// Synthetic bench

struct SyntheticBench
{
    fs::path            root;
    fs::path            config_path;
    std::vector<double> losses;
};

/// Writes a planted dataset under root/data, trains the reference model into
/// root/model.json and writes root/probe.toml pointing at both.
inline SyntheticBench prepare_synthetic_bench(const fs::path &root, const PlantConfig &plant, TrainConfig train,
                                              const TinyNetConfig &net_config = {})
{
    SyntheticBench bench;
    bench.root = fs::absolute(root);
    fs::create_directories(bench.root);

    const PlantedDataset data = generate_planted_dataset(plant);
    write_planted_dataset(data, bench.root / "data");

    TinyConvNet net = tiny_reference_net(plant.seed, net_config);
    train.seed      = plant.seed;
    bench.losses    = train_on_planted(net, data, train);
    save_tiny_model(net, bench.root / "model.json");

    PipelineConfig config;
    config.feature_source_model = bench.root / "model.json";
    config.inspected_model      = config.feature_source_model;
    config.data_root            = bench.root / "data";
    config.seed                 = plant.seed;
    config.output_root          = bench.root / "out";
    bench.config_path           = bench.root / "probe.toml";
    write_file_bytes(bench.config_path, config.to_toml(bench.root));
    return bench;
}

// ---------------------------------------------------------------------------
// Source data

struct SourceItem
{
    std::string id;
    int         label = 0;
    fs::path    image;
};

class SourceData
{
public:
    explicit SourceData(fs::path root)
        : root_(std::move(root))
    {
        const auto manifest_path = root_ / "manifest.json";
        if (!fs::exists(manifest_path))
            throw NotFoundError("no dataset manifest at " + manifest_path.string());
        const auto manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
        for (const auto &s : manifest.at("samples"))
        {
            SourceItem item{s.at("image_id").get<std::string>(), s.at("label").get<int>(),
                            root_ / s.at("image").get<std::string>()};
            labels_[item.id] = item.label;
            index_[item.id]  = items_.size();
            items_.push_back(std::move(item));
        }
        manifest_checksum_ = file_checksum(manifest_path);
        if (fs::exists(root_ / "classes.json"))
            classes_ = nlohmann::json::parse(read_file_bytes(root_ / "classes.json"));
    }

    const std::vector<SourceItem> &items() const noexcept { return items_; }
    const LabelIndex              &labels() const noexcept { return labels_; }
    const fs::path                &root() const noexcept { return root_; }
    const std::string             &checksum() const noexcept { return manifest_checksum_; }

    const SourceItem &item(const std::string &id) const
    {
        auto it = index_.find(id);
        if (it == index_.end())
            throw NotFoundError("image '" + id + "' is not in the dataset");
        return items_[it->second];
    }

    Image image(const std::string &id) const
    {
        {
            std::lock_guard lock(mutex_);
            if (auto it = cache_.find(id); it != cache_.end())
                return it->second;
        }
        Image           img = read_image_png(item(id).image);
        std::lock_guard lock(mutex_);
        return cache_.emplace(id, std::move(img)).first->second;
    }

    ClassMetadata metadata(int i) const
    {
        for (const auto &c : classes_)
            if (c.value("class", -1) == i)
                return c.get<ClassMetadata>();
        return {{"class " + std::to_string(i)}, "", "", {}};
    }

private:
    fs::path                              root_;
    std::vector<SourceItem>               items_;
    LabelIndex                            labels_;
    std::map<std::string, std::size_t>    index_;
    std::string                           manifest_checksum_;
    nlohmann::json                        classes_ = nlohmann::json::array();
    mutable std::mutex                    mutex_;
    mutable std::map<std::string, Image> cache_;
};

// ---------------------------------------------------------------------------
// Pipeline

struct StageResult
{
    std::string           stage;
    bool                  up_to_date = false;
    std::vector<fs::path> outputs;
    nlohmann::json        summary = nlohmann::json::object();
};

class Pipeline
{
public:
    Pipeline(PipelineConfig config, fs::path stage_dir = {})
        : config_(std::move(config))
        , dir_(stage_dir.empty() ? config_.output_root : std::move(stage_dir))
    {
        config_.validate();
        fs::create_directories(dir_);
    }

    const PipelineConfig &config() const noexcept { return config_; }

    /// Recompute stages even when their stamp is current.
    void set_force(bool force) noexcept { force_ = force; }
    const fs::path       &stage_dir() const noexcept { return dir_; }

    StageResult run(const std::string &stage)
    {
        if (stage == "extract")
            return guarded(stage, {}, [this](StageResult &r) { extract(r); });
        if (stage == "select")
            return guarded(stage, {"extract"}, [this](StageResult &r) { select(r); });
        if (stage == "hits")
            return guarded(stage, {"select"}, [this](StageResult &r) { hits(r); });
        if (stage == "subsets")
        {
            require(ledger_path(), "annotate");
            return guarded(stage, {"extract", "hits"}, [this](StageResult &r) { subsets(r); }, {ledger_path()});
        }
        if (stage == "dataset")
            return guarded(stage, {"subsets"}, [this](StageResult &r) { dataset(r); }, {ledger_path()});
        if (stage == "evaluate")
            return guarded(stage, {"dataset"}, [this](StageResult &r) { evaluate(r); });
        if (stage == "report")
            return guarded(stage, {"select", "dataset", "evaluate"}, [this](StageResult &r) { report(r); });
        throw InvalidArgument("unknown stage '" + stage + "'");
    }

    // -- annotation ---------------------------------------------------------

    fs::path annotation_dir() const { return dir_ / "annotation"; }
    fs::path ledger_path() const { return annotation_dir() / "ledger.json"; }
    fs::path journal_path() const { return annotation_dir() / "responses.jsonl"; }
    fs::path asset_dir() const { return dir_ / "assets"; }

    /// HITs built so far, with the journal of earlier responses replayed.
    std::unique_ptr<AnnotationStore> annotation_store() const
    {
        require(dir_ / "hits" / "discovery.json", "hits");
        auto store = std::make_unique<AnnotationStore>(config_.quorum);
        for (const auto &h : nlohmann::json::parse(read_file_bytes(dir_ / "hits" / "discovery.json")))
            store->add(h.get<DiscoveryHit>());
        const auto unannotatable = nlohmann::json::parse(read_file_bytes(dir_ / "hits" / "unannotatable.json"));
        for (const auto &u : unannotatable)
            store->mark_unannotatable(u.at("class").get<int>(), u.at("feature").get<int>());
        if (fs::exists(dir_ / "subsets" / "validation.json"))
            for (const auto &h : nlohmann::json::parse(read_file_bytes(dir_ / "subsets" / "validation.json")))
                store->add(h.get<ValidationHit>());
        replay_responses(*store, journal_path());
        return store;
    }

    /// Answers all open HITs with the ground-truth annotator, in-process.
    std::size_t annotate_scripted()
    {
        auto store = annotation_store();
        auto bot   = scripted_annotator();
        fs::create_directories(annotation_dir());
        std::size_t n = 0;
        {
            std::ofstream journal(journal_path(), std::ios::app);
            n = bot.annotate(*store, [&](const WorkerResponse &r, const SubmitResult &) {
                journal << nlohmann::json(r).dump() << '\n';
            });
        }
        write_file_bytes(ledger_path(), store->ledger().to_json().dump(2) + "\n");
        return n;
    }

    ScriptedAnnotator scripted_annotator() const
    {
        auto truth = std::make_shared<std::map<std::string, RegionTruth>>(read_region_truth(config_.data_root));
        if (truth->empty())
            throw CapabilityError("the dataset under " + config_.data_root.string()
                                  + " records no ground-truth regions for a scripted annotator");
        auto model = std::make_shared<ModelBundle>(load_model(config_.feature_source_model));
        auto data  = source();
        return ScriptedAnnotator(
            [model, data](const std::string &id, int j) { return nam(*model, *data, id, j); },
            [truth](const std::string &id) {
                auto it = truth->find(id);
                if (it == truth->end())
                    throw NotFoundError("no ground truth for image '" + id + "'");
                return it->second;
            });
    }

    /// Writes the ledger of `store` (used by the HTTP service on shutdown).
    void save_ledger(const AnnotationStore &store) const
    {
        write_file_bytes(ledger_path(), store.ledger().to_json().dump(2) + "\n");
    }

private:
    // -- helpers ------------------------------------------------------------

    std::shared_ptr<SourceData> source() const
    {
        if (!source_)
            source_ = std::make_shared<SourceData>(config_.data_root);
        return source_;
    }

    const ModelBundle &feature_model() const
    {
        if (!feature_model_)
            feature_model_ = std::make_shared<ModelBundle>(load_model(config_.feature_source_model));
        return *feature_model_;
    }

    const ModelBundle &inspected_model() const
    {
        if (!inspected_model_)
            inspected_model_ = std::make_shared<ModelBundle>(load_model(config_.inspected_model));
        return *inspected_model_;
    }

    static SoftMask nam(const ModelBundle &model, const SourceData &data, const std::string &id, int j)
    {
        const Image img = data.image(id);
        return neural_activation_map(model.feature_maps(img), j, img.spatial(), id);
    }

    static void require(const fs::path &p, const std::string &stage)
    {
        if (!fs::exists(p))
            throw MissingArtifactError(stage, p);
    }

    fs::path cache_dir() const { return dir_ / "extract" / "cache"; }

    ActivationCache cache_for(const ModelBundle &m) const
    {
        require(ActivationCache::index_path(cache_dir(), m.identifier()), "extract");
        return ActivationCache(cache_dir(), m.identifier(), m.feature_count());
    }

    std::string input_hash(const std::string &stage, const std::vector<std::string> &upstream,
                           const std::vector<fs::path> &extra) const
    {
        std::string text = stage + "\n" + config_.to_json().dump() + "\n" + source()->checksum() + "\n"
                           + file_checksum(config_.feature_source_model) + "\n"
                           + file_checksum(config_.inspected_model) + "\n";
        for (const auto &u : upstream)
        {
            const fs::path stamp = dir_ / u / "stamp.json";
            require(stamp, u);
            text += read_file_bytes(stamp);
        }
        for (const auto &p : extra)
            text += fs::exists(p) ? file_checksum(p) : std::string("-");
        return hex64(fnv1a64(text));
    }

    template <class Fn>
    StageResult guarded(const std::string &stage, const std::vector<std::string> &upstream, Fn &&body,
                        const std::vector<fs::path> &extra = {})
    {
        const fs::path stage_path = dir_ / stage;
        const fs::path stamp_path = stage_path / "stamp.json";
        const std::string inputs  = input_hash(stage, upstream, extra);

        StageResult result;
        result.stage = stage;
        if (!force_ && fs::exists(stamp_path))
        {
            const auto stamp = nlohmann::json::parse(read_file_bytes(stamp_path));
            bool       fresh = stamp.value("inputs", "") == inputs;
            for (auto it = stamp["outputs"].begin(); fresh && it != stamp["outputs"].end(); ++it)
                fresh = fs::exists(dir_ / it.key()) && file_checksum(dir_ / it.key()) == it.value().get<std::string>();
            if (fresh)
            {
                result.up_to_date = true;
                for (auto it = stamp["outputs"].begin(); it != stamp["outputs"].end(); ++it)
                    result.outputs.push_back(dir_ / it.key());
                result.summary = stamp.value("summary", nlohmann::json::object());
                return result;
            }
        }

        fs::create_directories(stage_path);
        body(result);

        nlohmann::json stamp;
        stamp["stage"]   = stage;
        stamp["inputs"]  = inputs;
        stamp["outputs"] = nlohmann::json::object();
        for (const auto &p : result.outputs)
            stamp["outputs"][fs::relative(p, dir_).generic_string()] = file_checksum(p);
        stamp["summary"] = result.summary;
        write_file_bytes(stamp_path, stamp.dump(2) + "\n");
        return result;
    }

    // -- stages -------------------------------------------------------------

    void extract(StageResult &r)
    {
        const auto       &data = *source();
        std::vector<const ModelBundle *> models{&feature_model()};
        if (inspected_model().identifier() != feature_model().identifier())
            models.push_back(&inspected_model());

        for (const ModelBundle *m : models)
        {
            ActivationCache::clear(cache_dir(), m->identifier());
            ActivationCache cache(cache_dir(), m->identifier(), m->feature_count());
            for (const auto &item : data.items())
            {
                const Forward f = forward(*m, data.image(item.id), item.id);
                cache.put(item.id, f.feature_vector, f.predicted, f.logits[static_cast<std::size_t>(f.predicted)]);
            }
            r.outputs.push_back(ActivationCache::data_path(cache_dir(), m->identifier()));
            r.outputs.push_back(ActivationCache::index_path(cache_dir(), m->identifier()));
            r.summary["models"].push_back(m->identifier());
        }
        std::string labels = "image_id\tlabel\n";
        for (const auto &item : data.items())
            labels += item.id + "\t" + std::to_string(item.label) + "\n";
        write_file_bytes(dir_ / "extract" / "labels.tsv", labels);
        r.outputs.push_back(dir_ / "extract" / "labels.tsv");
        r.summary["images"] = data.items().size();
    }

    void select(StageResult &r)
    {
        const auto &data = *source();
        std::vector<const ModelBundle *> models{&feature_model()};
        if (inspected_model().identifier() != feature_model().identifier())
            models.push_back(&inspected_model());

        AccuracyTable  table;
        nlohmann::json accuracy = nlohmann::json::object();
        for (const ModelBundle *m : models)
        {
            const ActivationCache cache = cache_for(*m);
            std::vector<int>      labels, predicted;
            for (const auto &item : data.items())
            {
                labels.push_back(item.label);
                predicted.push_back(cache.at(item.id).predicted);
            }
            for (Grouping g : {Grouping::label, Grouping::prediction})
            {
                auto acc                                    = per_class_accuracy(labels, predicted, m->num_classes(), g);
                table[{m->identifier(), g}]                 = acc;
                for (const auto &[c, a] : acc)
                    accuracy[m->identifier()][to_string(g)][std::to_string(c)] = a;
            }
        }
        const StudyClassSet study = select_study_classes(table, config_.n_extreme);

        const ActivationCache        cache = cache_for(feature_model());
        std::vector<ImportanceTable> tables;
        nlohmann::json               top     = nlohmann::json::array();
        nlohmann::json               skipped = nlohmann::json::array();
        for (int i : study.classes)
        {
            try
            {
                const auto rbar = mean_feature_vector(cache, i);
                tables.push_back(feature_importance(rbar, head_row(feature_model(), i), i));
                const auto &t        = tables.back();
                const auto  features = top_features(t, std::min(config_.top_features, feature_model().feature_count()));
                nlohmann::json row   = {{"class", i}, {"features", features}};
                for (int j : features)
                    row["importance"].push_back(t.importance[static_cast<std::size_t>(j)]);
                top.push_back(std::move(row));
            }
            catch (const EmptySubsetError &e)
            {
                skipped.push_back({{"class", i}, {"reason", e.what()}});
            }
        }

        nlohmann::json sc = {{"classes", study.classes}, {"flags", study.flags}, {"skipped", skipped}};
        for (const auto &[c, p] : study.provenance)
            sc["provenance"][std::to_string(c)] = p;

        write_file_bytes(dir_ / "select" / "accuracy.json", accuracy.dump(2) + "\n");
        write_file_bytes(dir_ / "select" / "study_classes.json", sc.dump(2) + "\n");
        write_importance_tables(dir_ / "select" / "importance.tsv", tables);
        write_file_bytes(dir_ / "select" / "top_features.json", top.dump(2) + "\n");
        for (const char *f : {"accuracy.json", "study_classes.json", "importance.tsv", "top_features.json"})
            r.outputs.push_back(dir_ / "select" / f);
        r.summary = {{"study_classes", study.classes.size()}, {"skipped", skipped.size()}};
    }

    AssetRenderer asset_renderer(std::set<std::string> &rendered) const
    {
        return [this, &rendered](const std::string &kind, const std::string &id, int j) -> std::string {
            std::string rel = kind == "image" ? "image/" + id + ".png"
                                              : kind + "/" + std::to_string(j) + "/" + id + ".png";
            if (config_.render_assets && (rendered.insert(rel).second || !fs::exists(asset_dir() / rel)))
            {
                const Image img = source()->image(id);
                if (kind == "image")
                    write_image_png(asset_dir() / rel, img);
                else if (kind == "heatmap")
                    write_image_png(asset_dir() / rel, heatmap_overlay(img, nam(feature_model(), *source(), id, j)));
                else if (kind == "attack")
                    write_image_png(asset_dir() / rel, feature_attack(feature_model(), img, j, config_.attack));
                else
                    throw InvalidArgument("unknown asset kind '" + kind + "'");
            }
            return "/assets/" + rel;
        };
    }

    void hits(StageResult &r)
    {
        require(dir_ / "select" / "top_features.json", "select");
        const auto            top   = nlohmann::json::parse(read_file_bytes(dir_ / "select" / "top_features.json"));
        const ActivationCache cache = cache_for(feature_model());
        const auto           &data  = *source();

        std::set<std::string> rendered;
        const auto            render = asset_renderer(rendered);
        nlohmann::json        built  = nlohmann::json::array();
        nlohmann::json        skipped = nlohmann::json::array();
        for (const auto &row : top)
        {
            const int i = row.at("class").get<int>();
            std::vector<std::string> pool;
            for (const auto &item : data.items())
                if (item.label == i && pool.size() < 3)
                    pool.push_back(item.id);
            for (int j : row.at("features").get<std::vector<int>>())
            {
                try
                {
                    built.push_back(build_discovery_hit(i, j, cache, render, data.metadata(i), pool));
                }
                catch (const UnannotatableError &e)
                {
                    skipped.push_back({{"class", i}, {"feature", j}, {"reason", e.what()}});
                }
            }
        }
        write_file_bytes(dir_ / "hits" / "discovery.json", built.dump(2) + "\n");
        write_file_bytes(dir_ / "hits" / "unannotatable.json", skipped.dump(2) + "\n");
        r.outputs = {dir_ / "hits" / "discovery.json", dir_ / "hits" / "unannotatable.json"};
        r.summary = {{"discovery_hits", built.size()}, {"unannotatable", skipped.size()}};
    }

    static nlohmann::json subset_json(const FeatureSubset &s)
    {
        nlohmann::json members = nlohmann::json::array();
        for (const auto &m : s.members)
            members.push_back({{"image_id", m.image_id}, {"activation", m.activation}, {"mask", m.mask}});
        return {{"class", s.class_index},
                {"feature", s.feature_index},
                {"k", s.k},
                {"truncated", s.truncated},
                {"members", members}};
    }

    static FeatureSubset subset_from_json(const nlohmann::json &j)
    {
        FeatureSubset s;
        s.class_index   = j.at("class").get<int>();
        s.feature_index = j.at("feature").get<int>();
        s.k             = j.at("k").get<int>();
        s.truncated     = j.at("truncated").get<bool>();
        for (const auto &m : j.at("members"))
            s.members.push_back(
                {m.at("image_id").get<std::string>(), m.at("activation").get<double>(), m.at("mask").get<std::string>()});
        return s;
    }

    AnnotationLedger load_ledger() const
    {
        require(ledger_path(), "annotate");
        return AnnotationLedger::from_json(nlohmann::json::parse(read_file_bytes(ledger_path())));
    }

    std::vector<FeatureSubset> load_subsets() const
    {
        require(dir_ / "subsets" / "subsets.json", "subsets");
        std::vector<FeatureSubset> out;
        for (const auto &j : nlohmann::json::parse(read_file_bytes(dir_ / "subsets" / "subsets.json")))
            out.push_back(subset_from_json(j));
        return out;
    }

    /// Masks of all subsets, as persisted (8-bit).
    MaskStore load_masks(const std::vector<FeatureSubset> &subsets) const
    {
        MaskStore store;
        for (const auto &s : subsets)
            for (const auto &m : s.members)
            {
                SoftMask mask;
                mask.values         = read_mask_png(dir_ / "subsets" / m.mask);
                mask.source_feature = s.feature_index;
                mask.source_image   = m.image_id;
                store.put(s.feature_index, m.image_id, std::move(mask));
            }
        return store;
    }

    void subsets(StageResult &r)
    {
        const AnnotationLedger ledger = load_ledger();
        const ActivationCache  cache  = cache_for(feature_model());
        const auto            &data   = *source();

        MaskStore              store;
        const auto             render = [this](const std::string &id, int j) {
            return nam(feature_model(), *source(), id, j);
        };
        nlohmann::json         subsets    = nlohmann::json::array();
        nlohmann::json         validation = nlohmann::json::array();
        nlohmann::json         skipped    = nlohmann::json::array();
        std::set<std::string>  rendered;
        const auto             assets = asset_renderer(rendered);
        std::set<std::string>  written;
        for (const auto &[key, rec] : ledger.records())
        {
            if (rec.verdict == Verdict::undecided)
                continue;
            FeatureSubset s;
            try
            {
                s = build_feature_subset(key.first, key.second, config_.k, cache, data.labels(), store, render);
            }
            catch (const EmptySubsetError &e)
            {
                skipped.push_back({{"class", key.first}, {"feature", key.second}, {"reason", e.what()}});
                continue;
            }
            for (const auto &m : s.members)
                if (written.insert(m.mask).second)
                {
                    write_mask_png(dir_ / "subsets" / m.mask, store.get(s.feature_index, m.image_id).values);
                    r.outputs.push_back(dir_ / "subsets" / m.mask);
                }
            if (rec.verdict == Verdict::spurious)
            {
                if (s.members.size() >= 2 * static_cast<std::size_t>(kTopImages))
                    validation.push_back(build_validation_hit(s, assets));
                else
                    skipped.push_back({{"class", key.first},
                                       {"feature", key.second},
                                       {"reason", "subset too small for a validation HIT"}});
            }
            subsets.push_back(subset_json(s));
        }
        write_file_bytes(dir_ / "subsets" / "subsets.json", subsets.dump(2) + "\n");
        write_file_bytes(dir_ / "subsets" / "validation.json", validation.dump(2) + "\n");
        write_file_bytes(dir_ / "subsets" / "skipped.json", skipped.dump(2) + "\n");
        for (const char *f : {"subsets.json", "validation.json", "skipped.json"})
            r.outputs.push_back(dir_ / "subsets" / f);
        r.summary = {{"subsets", subsets.size()}, {"validation_hits", validation.size()}, {"skipped", skipped.size()}};
    }

    fs::path dataset_dir() const { return dir_ / "dataset"; }

    void dataset(StageResult &r)
    {
        const AnnotationLedger ledger  = load_ledger();
        const auto             subsets = load_subsets();
        const MaskStore        store   = load_masks(subsets);
        const auto            &data    = *source();

        const fs::path root = dataset_dir();
        const auto     refs = [&](const std::string &id) {
            return fs::relative(data.item(id).image, root).generic_string();
        };
        const auto samples = assemble_samples(ledger, subsets, store, data.labels(), refs);
        fs::remove_all(root / "masks");
        export_dataset(samples, root, ledger.to_json());
        const DatasetStats stats = dataset_stats(samples);
        write_file_bytes(root / "stats.json", to_json(stats).dump(2) + "\n");
        r.outputs = {root / "manifest.json", root / "stats.json"};
        r.summary = {{"samples", samples.size()}, {"classes_with_spurious", stats.classes_with_spurious()}};
    }

    void evaluate(StageResult &r)
    {
        const ImportedDataset ds = import_dataset(dataset_dir());
        if (!ds.errors.empty())
        {
            std::string msg = "dataset has " + std::to_string(ds.errors.size()) + " unreadable samples, first: "
                              + ds.errors.front().image_id + ": " + ds.errors.front().message;
            throw IoError(msg);
        }
        const auto      subsets = load_subsets();
        const MaskStore store   = load_masks(subsets);
        const auto      ledger  = load_ledger();
        const auto     &data    = *source();
        const ImageSource images = [&](const std::string &id) { return data.image(id); };

        const auto unions = class_unions(ds.samples);
        std::vector<FeatureInput> features;
        for (const auto &s : subsets)
            if (const auto *rec = ledger.find(s.class_index, s.feature_index))
                features.push_back({&s, to_string(rec->verdict)});

        std::vector<double> sigmas = config_.sigmas;
        std::sort(sigmas.begin(), sigmas.end());
        sigmas.erase(std::unique(sigmas.begin(), sigmas.end()), sigmas.end());

        const EvaluationReport report =
            sigma_sweep(inspected_model(), unions, features, store, images, sigmas, config_.seed, config_.clip);
        write_file_bytes(dir_ / "evaluate" / "report.json", to_json(report).dump(2) + "\n");
        r.outputs = write_report_plots(report, dir_ / "evaluate" / "plots");
        r.outputs.push_back(dir_ / "evaluate" / "report.json");
        r.summary = {{"classes", report.classes.size()}, {"features", report.features.size()}};
    }

public:
    /// DS(i) and DC(i) with combined masks, from dataset samples.
    static std::vector<ClassUnions> class_unions(const std::vector<MaskedSample> &samples)
    {
        std::map<int, ClassUnions> by_class;
        for (const auto &s : samples)
        {
            auto &cu       = by_class[s.label];
            cu.class_index = s.label;
            auto add       = [&](std::optional<ClassUnion> &u, UnionKind kind, const std::map<int, SoftMask> &masks) {
                if (masks.empty())
                    return;
                if (!u)
                    u = ClassUnion{s.label, kind, {}, {}, {}};
                std::vector<SoftMask> list;
                for (const auto &[j, m] : masks)
                {
                    list.push_back(m);
                    if (std::find(u->features.begin(), u->features.end(), j) == u->features.end())
                        u->features.push_back(j);
                }
                u->image_ids.push_back(s.image_id);
                u->masks.emplace(s.image_id, combined_mask(s.image_id, list));
            };
            add(cu.spurious, UnionKind::spurious, s.spurious_masks);
            add(cu.causal, UnionKind::causal, s.causal_masks);
        }
        std::vector<ClassUnions> out;
        for (auto &[c, cu] : by_class)
        {
            for (auto *u : {&cu.spurious, &cu.causal})
                if (*u)
                {
                    std::sort((*u)->features.begin(), (*u)->features.end());
                    std::sort((*u)->image_ids.begin(), (*u)->image_ids.end());
                }
            out.push_back(std::move(cu));
        }
        return out;
    }

private:
    void report(StageResult &r)
    {
        const auto top    = nlohmann::json::parse(read_file_bytes(dir_ / "select" / "top_features.json"));
        const auto stats  = nlohmann::json::parse(read_file_bytes(dataset_dir() / "stats.json"));
        const auto eval   = nlohmann::json::parse(read_file_bytes(dir_ / "evaluate" / "report.json"));
        const auto ledger = load_ledger();

        // Drops are read at the configured sigma, or at the largest swept one.
        const auto  sigmas = eval.at("sigmas").get<std::vector<double>>();
        std::size_t at     = static_cast<std::size_t>(
            std::find(sigmas.begin(), sigmas.end(), config_.sigma) - sigmas.begin());
        if (at == sigmas.size())
            at = sigmas.size() - 1;
        const double sigma = sigmas[at];

        nlohmann::json summary;
        summary["model"] = eval.at("model");
        summary["sigma"] = sigma;
        summary["stats"] = stats;
        summary["classes"] = nlohmann::json::array();
        std::string md = "# Pipeline summary\n\nModel: `" + eval.at("model").get<std::string>() + "`, sigma "
                         + std::to_string(sigma) + "\n\n";
        md += "| class | top features (verdict) | spurious-region drop | causal-region drop |\n";
        md += "|---|---|---|---|\n";

        std::map<int, nlohmann::json> curves;
        for (const auto &c : eval.at("classes"))
            curves[c.at("class").get<int>()] = c;

        char buf[64];
        for (const auto &row : top)
        {
            const int      i = row.at("class").get<int>();
            nlohmann::json entry{{"class", i}, {"features", nlohmann::json::array()}};
            std::string    feats;
            for (int j : row.at("features").get<std::vector<int>>())
            {
                const LedgerRecord *rec     = ledger.find(i, j);
                const std::string   verdict = rec ? to_string(rec->verdict) : "unannotated";
                entry["features"].push_back({{"feature", j}, {"verdict", verdict}});
                feats += (feats.empty() ? "" : ", ") + std::to_string(j) + " (" + verdict + ")";
            }
            std::string sd = "-", cd = "-";
            if (auto it = curves.find(i); it != curves.end())
            {
                const auto &c = it->second;
                if (!c.at("causal_accuracy").empty())
                {
                    const double d = c.at("standard_accuracy").at("spurious_union").get<double>()
                                     - c.at("causal_accuracy").at(at).get<double>();
                    entry["spurious_region_drop"] = d;
                    std::snprintf(buf, sizeof buf, "%.3f", d);
                    sd = buf;
                }
                if (!c.at("spurious_accuracy").empty())
                {
                    const double d = c.at("standard_accuracy").at("causal_union").get<double>()
                                     - c.at("spurious_accuracy").at(at).get<double>();
                    entry["causal_region_drop"] = d;
                    std::snprintf(buf, sizeof buf, "%.3f", d);
                    cd = buf;
                }
            }
            summary["classes"].push_back(entry);
            md += "| " + std::to_string(i) + " | " + feats + " | " + sd + " | " + cd + " |\n";
        }
        md += "\nClasses with at least one spurious feature: "
              + std::to_string(stats.at("classes_with_spurious").get<int>()) + "\n";

        write_file_bytes(dir_ / "report" / "summary.json", summary.dump(2) + "\n");
        write_file_bytes(dir_ / "report" / "summary.md", md);
        r.outputs = {dir_ / "report" / "summary.json", dir_ / "report" / "summary.md"};
        r.summary = {{"classes", summary["classes"].size()}};
    }

    PipelineConfig                       config_;
    fs::path                             dir_;
    bool                                 force_ = false;
    mutable std::shared_ptr<SourceData>  source_;
    mutable std::shared_ptr<ModelBundle> feature_model_;
    mutable std::shared_ptr<ModelBundle> inspected_model_;
};

} // namespace probe
