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

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace probe {

enum class Grouping
{
    label,      // images whose ground-truth label is i
    prediction, // images the model predicts as i
};

inline const char *to_string(Grouping g) noexcept
{
    return g == Grouping::label ? "label" : "prediction";
}

struct AccuracyGroup
{
    std::string model;
    Grouping    grouping = Grouping::label;

    friend auto operator<=>(const AccuracyGroup &, const AccuracyGroup &) = default;
};

/// Per (model, grouping): class index -> accuracy in [0,1].
using AccuracyTable = std::map<AccuracyGroup, std::map<int, double>>;

struct StudyClassSet
{
    std::set<int>                           classes;
    std::map<int, std::vector<std::string>> provenance; // e.g. "robust/label/high"
    std::vector<std::string>                flags;
};

/// Accuracy of each class under one grouping. A group with no images (a
/// class the model never predicts) gets accuracy 0.
inline std::map<int, double> per_class_accuracy(std::span<const int> labels, std::span<const int> predicted,
                                                int num_classes, Grouping grouping)
{
    if (labels.size() != predicted.size())
        throw InvalidArgument("per_class_accuracy: labels and predictions differ in length");
    std::vector<std::size_t> hits(static_cast<std::size_t>(num_classes)), total(static_cast<std::size_t>(num_classes));
    for (std::size_t n = 0; n < labels.size(); ++n)
    {
        const int key = grouping == Grouping::label ? labels[n] : predicted[n];
        if (key < 0 || key >= num_classes)
            throw InvalidArgument("per_class_accuracy: class index out of range");
        ++total[key];
        hits[key] += labels[n] == predicted[n] ? 1 : 0;
    }
    std::map<int, double> out;
    for (int i = 0; i < num_classes; ++i)
        out[i] = total[i] ? static_cast<double>(hits[i]) / static_cast<double>(total[i]) : 0.0;
    return out;
}

/// Union over every (model, grouping) of the n_extreme highest- and
/// n_extreme lowest-accuracy classes. Equal accuracies rank the lower class
/// index first in both directions.
inline StudyClassSet select_study_classes(const AccuracyTable &table, int n_extreme = 50)
{
    if (table.empty())
        throw InvalidArgument("select_study_classes: empty accuracy table");
    if (n_extreme <= 0)
        throw InvalidArgument("select_study_classes: n_extreme must be positive");

    std::set<int> universe;
    for (const auto &[cls, acc] : table.begin()->second)
        universe.insert(cls);

    StudyClassSet out;
    for (const auto &[group, accuracies] : table)
    {
        std::set<int> classes;
        std::vector<std::pair<int, double>> rows;
        for (const auto &[cls, acc] : accuracies)
        {
            if (!(acc >= 0.0 && acc <= 1.0))
                throw InvalidArgument("select_study_classes: accuracy outside [0,1] for class " + std::to_string(cls));
            classes.insert(cls);
            rows.emplace_back(cls, acc);
        }
        if (classes != universe)
            throw InvalidArgument("select_study_classes: groupings cover different class universes");

        const std::string prefix = group.model + "/" + to_string(group.grouping) + "/";
        const std::size_t take   = std::min(rows.size(), static_cast<std::size_t>(n_extreme));
        if (take < static_cast<std::size_t>(n_extreme))
            out.flags.push_back(prefix + ": only " + std::to_string(rows.size()) + " classes, taking all");

        auto high = rows;
        std::stable_sort(high.begin(), high.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
        auto low = rows;
        std::stable_sort(low.begin(), low.end(), [](const auto &a, const auto &b) { return a.second < b.second; });

        for (std::size_t n = 0; n < take; ++n)
        {
            out.classes.insert(high[n].first);
            out.provenance[high[n].first].push_back(prefix + "high");
            out.classes.insert(low[n].first);
            out.provenance[low[n].first].push_back(prefix + "low");
        }
    }
    return out;
}

/// Mean pooled feature vector over the cached images the model predicts as
/// `class_index`, optionally restricted to `split`.
inline std::vector<float> mean_feature_vector(const ActivationCache &cache, int class_index,
                                              const std::unordered_set<std::string> *split = nullptr)
{
    std::vector<double> acc(static_cast<std::size_t>(cache.feature_count()), 0.0);
    std::size_t         count = 0;
    for (const auto &id : cache.image_ids())
    {
        if (split && !split->count(id))
            continue;
        auto rec = cache.at(id);
        if (rec.predicted != class_index)
            continue;
        for (std::size_t j = 0; j < acc.size(); ++j)
            acc[j] += rec.feature_vector[j];
        ++count;
    }
    if (count == 0)
        throw EmptySubsetError("no cached image of model '" + cache.model_id() + "' is predicted as class "
                               + std::to_string(class_index));
    std::vector<float> out(acc.size());
    for (std::size_t j = 0; j < acc.size(); ++j)
        out[j] = static_cast<float>(acc[j] / static_cast<double>(count));
    return out;
}

struct ImportanceTable
{
    int                class_index = -1;
    std::vector<float> mean_vector;
    std::vector<float> head_row;
    std::vector<float> importance;
    std::vector<int>   ranks; // feature indices, most important first

    /// 1-based rank of feature j.
    int rank_of(int j) const
    {
        auto it = std::find(ranks.begin(), ranks.end(), j);
        if (it == ranks.end())
            throw InvalidArgument("rank_of: unknown feature " + std::to_string(j));
        return static_cast<int>(it - ranks.begin()) + 1;
    }
};

/// Neural feature importance: importance[j] = mean_vector[j] * head_row[j],
/// ranked by descending importance with ties to the lower feature index.
inline ImportanceTable feature_importance(std::span<const float> mean_vector, std::span<const float> head_row,
                                          int class_index = -1)
{
    if (mean_vector.size() != head_row.size())
        throw InvalidArgument("feature_importance: mean vector has " + std::to_string(mean_vector.size())
                              + " entries, head row has " + std::to_string(head_row.size()));
    ImportanceTable t;
    t.class_index = class_index;
    t.mean_vector.assign(mean_vector.begin(), mean_vector.end());
    t.head_row.assign(head_row.begin(), head_row.end());
    t.importance.resize(mean_vector.size());
    for (std::size_t j = 0; j < mean_vector.size(); ++j)
        t.importance[j] = mean_vector[j] * head_row[j];

    t.ranks.resize(mean_vector.size());
    std::iota(t.ranks.begin(), t.ranks.end(), 0);
    std::stable_sort(t.ranks.begin(), t.ranks.end(),
                     [&](int a, int b) { return t.importance[a] > t.importance[b]; });
    return t;
}

inline std::vector<int> top_features(const ImportanceTable &table, int n = 5)
{
    if (n < 0 || n > static_cast<int>(table.ranks.size()))
        throw InvalidArgument("top_features: n must be in [0, F]");
    return {table.ranks.begin(), table.ranks.begin() + n};
}

/// Tab-separated: class_index feature_index mean_value weight importance rank,
/// one row per (class, feature), rank 1-based.
inline void write_importance_tables(const std::filesystem::path &path, const std::vector<ImportanceTable> &tables)
{
    if (!path.parent_path().empty())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << "class_index\tfeature_index\tmean_value\tweight\timportance\trank\n";
    char buf[160];
    for (const auto &t : tables)
    {
        std::vector<int> rank(t.ranks.size());
        for (std::size_t r = 0; r < t.ranks.size(); ++r)
            rank[t.ranks[r]] = static_cast<int>(r) + 1;
        for (std::size_t j = 0; j < t.importance.size(); ++j)
        {
            std::snprintf(buf, sizeof buf, "%d\t%zu\t%.9g\t%.9g\t%.9g\t%d\n", t.class_index, j,
                          static_cast<double>(t.mean_vector[j]), static_cast<double>(t.head_row[j]),
                          static_cast<double>(t.importance[j]), rank[j]);
            out << buf;
        }
    }
    if (!out)
        throw IoError("cannot write " + path.string());
}

inline std::vector<ImportanceTable> read_importance_tables(const std::filesystem::path &path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::string line;
    std::getline(in, line); // header

    std::map<int, ImportanceTable>      tables;
    std::map<int, std::map<int, int>>   rank_rows;
    while (std::getline(in, line))
    {
        if (line.empty())
            continue;
        std::istringstream row(line);
        int                cls = 0, feature = 0, rank = 0;
        double             mean = 0, weight = 0, importance = 0;
        if (!(row >> cls >> feature >> mean >> weight >> importance >> rank))
            throw IoError("malformed importance row: " + line);
        auto &t       = tables[cls];
        t.class_index = cls;
        if (feature != static_cast<int>(t.mean_vector.size()))
            throw IoError("importance rows for class " + std::to_string(cls) + " are not in feature order");
        t.mean_vector.push_back(static_cast<float>(mean));
        t.head_row.push_back(static_cast<float>(weight));
        t.importance.push_back(static_cast<float>(importance));
        rank_rows[cls][rank] = feature;
    }
    std::vector<ImportanceTable> out;
    for (auto &[cls, t] : tables)
    {
        for (const auto &[rank, feature] : rank_rows[cls])
            t.ranks.push_back(feature);
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace probe
