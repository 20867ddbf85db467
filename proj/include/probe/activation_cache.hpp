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

#include "error.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace probe {

static_assert(std::endian::native == std::endian::little, "activation cache assumes a little-endian host");

struct CachedActivation
{
    std::vector<float> feature_vector;
    int                predicted = 0;
    float              logit     = 0.0f; // logit of the predicted class
};

/// On-disk cache of pooled feature vectors for one model.
///
///   <dir>/<model>.f32  concatenated little-endian float32 vectors of length F
///   <dir>/<model>.idx  one line per image: id \t byte offset \t predicted \t logit
///
/// Distinct keys may be written concurrently. Re-writing a key with an
/// identical record is a no-op; a different record is a ConflictError.
class ActivationCache
{
public:
    ActivationCache(std::filesystem::path dir, std::string model_id, int feature_count)
        : dir_(std::move(dir))
        , model_id_(std::move(model_id))
        , feature_count_(feature_count)
    {
        if (feature_count_ <= 0)
            throw InvalidArgument("activation cache: feature_count must be positive");
        if (model_id_.empty() || model_id_.find_first_of("/\\\t\n") != std::string::npos)
            throw InvalidArgument("activation cache: unusable model identifier '" + model_id_ + "'");
        std::filesystem::create_directories(dir_);
        load();
    }

    static std::filesystem::path data_path(const std::filesystem::path &dir, const std::string &model_id)
    {
        return dir / (model_id + ".f32");
    }

    static std::filesystem::path index_path(const std::filesystem::path &dir, const std::string &model_id)
    {
        return dir / (model_id + ".idx");
    }

    /// Remove both files of a model's cache.
    static void clear(const std::filesystem::path &dir, const std::string &model_id)
    {
        std::filesystem::remove(data_path(dir, model_id));
        std::filesystem::remove(index_path(dir, model_id));
    }

    void put(const std::string &image_id, std::span<const float> vector, int predicted, float logit)
    {
        if (image_id.empty() || image_id.find_first_of("\t\n\r") != std::string::npos)
            throw InvalidArgument("activation cache: invalid image id '" + image_id + "'");
        if (static_cast<int>(vector.size()) != feature_count_)
            throw InvalidArgument("activation cache: vector for '" + image_id + "' has wrong length");

        std::lock_guard lock(mutex_);
        if (auto it = entries_.find(image_id); it != entries_.end())
        {
            const CachedActivation &old = records_[it->second];
            bool same = old.predicted == predicted && std::memcmp(&old.logit, &logit, sizeof(float)) == 0
                        && std::memcmp(old.feature_vector.data(), vector.data(), vector.size_bytes()) == 0;
            if (!same)
                throw ConflictError("activation cache: conflicting write for image '" + image_id + "' of model '"
                                    + model_id_ + "'");
            return;
        }

        const std::uint64_t offset = static_cast<std::uint64_t>(records_.size()) * feature_count_ * sizeof(float);
        {
            std::ofstream data(data_path(dir_, model_id_), std::ios::binary | std::ios::app);
            data.write(reinterpret_cast<const char *>(vector.data()), static_cast<std::streamsize>(vector.size_bytes()));
            if (!data)
                throw IoError("activation cache: failed writing " + data_path(dir_, model_id_).string());
        }
        {
            std::ofstream index(index_path(dir_, model_id_), std::ios::app);
            char          logit_text[32];
            std::snprintf(logit_text, sizeof logit_text, "%.9g", static_cast<double>(logit));
            index << image_id << '\t' << offset << '\t' << predicted << '\t' << logit_text << '\n';
            if (!index)
                throw IoError("activation cache: failed writing " + index_path(dir_, model_id_).string());
        }

        entries_.emplace(image_id, records_.size());
        ids_.push_back(image_id);
        records_.push_back({{vector.begin(), vector.end()}, predicted, logit});
    }

    std::optional<CachedActivation> get(const std::string &image_id) const
    {
        std::lock_guard lock(mutex_);
        auto            it = entries_.find(image_id);
        if (it == entries_.end())
            return std::nullopt;
        return records_[it->second];
    }

    CachedActivation at(const std::string &image_id) const
    {
        std::lock_guard lock(mutex_);
        auto            it = entries_.find(image_id);
        if (it == entries_.end())
            throw NotFoundError("activation cache: no record for image '" + image_id + "' of model '" + model_id_
                                + "'");
        return records_[it->second];
    }

    bool contains(const std::string &image_id) const
    {
        std::lock_guard lock(mutex_);
        return entries_.count(image_id) != 0;
    }

    /// Image ids in insertion order.
    std::vector<std::string> image_ids() const
    {
        std::lock_guard lock(mutex_);
        return ids_;
    }

    std::size_t size() const
    {
        std::lock_guard lock(mutex_);
        return ids_.size();
    }

    int                feature_count() const noexcept { return feature_count_; }
    const std::string &model_id() const noexcept { return model_id_; }

private:
    void load()
    {
        const auto idx = index_path(dir_, model_id_);
        if (!std::filesystem::exists(idx))
            return;

        std::ifstream data(data_path(dir_, model_id_), std::ios::binary);
        std::ifstream index(idx);
        if (!data || !index)
            throw IoError("activation cache: cannot open cache files for model '" + model_id_ + "'");

        std::string line;
        std::size_t line_no = 0;
        while (std::getline(index, line))
        {
            ++line_no;
            if (line.empty())
                continue;
            std::istringstream fields(line);
            std::string        id, offset_text, predicted_text, logit_text;
            if (!std::getline(fields, id, '\t') || !std::getline(fields, offset_text, '\t')
                || !std::getline(fields, predicted_text, '\t') || !std::getline(fields, logit_text))
                throw IoError("activation cache: malformed index line " + std::to_string(line_no));

            CachedActivation rec;
            rec.predicted = std::stoi(predicted_text);
            rec.logit     = std::stof(logit_text);
            rec.feature_vector.resize(static_cast<std::size_t>(feature_count_));
            data.seekg(static_cast<std::streamoff>(std::stoull(offset_text)));
            data.read(reinterpret_cast<char *>(rec.feature_vector.data()),
                      static_cast<std::streamsize>(rec.feature_vector.size() * sizeof(float)));
            if (!data)
                throw IoError("activation cache: truncated data for image '" + id + "'");

            if (entries_.count(id))
                throw ConflictError("activation cache: duplicate index entry for image '" + id + "'");
            entries_.emplace(id, records_.size());
            ids_.push_back(id);
            records_.push_back(std::move(rec));
        }
    }

    std::filesystem::path                        dir_;
    std::string                                  model_id_;
    int                                          feature_count_;
    mutable std::mutex                           mutex_;
    std::unordered_map<std::string, std::size_t> entries_;
    std::vector<std::string>                     ids_;
    std::vector<CachedActivation>                records_;
};

} // namespace probe
