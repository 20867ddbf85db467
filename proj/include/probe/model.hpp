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
#include "tensor.hpp"

#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace probe {

/// Per-channel normalisation applied to canonical [0,1] images before the
/// network sees them: (x - mean[c]) / stddev[c].
struct Preprocessing
{
    std::vector<float> mean;
    std::vector<float> stddev;

    static Preprocessing identity(int channels)
    {
        return {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
    }

    Image apply(const Image &canonical) const
    {
        check(canonical.channels);
        Image out = canonical;
        for (int c = 0; c < out.channels; ++c)
            for (float &v : out.plane(c))
                v = (v - mean[c]) / stddev[c];
        return out;
    }

    /// Chain rule back to canonical space: d/dx = d/dx_norm / stddev.
    Image unapply_gradient(Image grad) const
    {
        check(grad.channels);
        for (int c = 0; c < grad.channels; ++c)
            for (float &v : grad.plane(c))
                v /= stddev[c];
        return grad;
    }

    void check(int channels) const
    {
        if (static_cast<int>(mean.size()) != channels || static_cast<int>(stddev.size()) != channels)
            throw InvalidArgument("preprocessing does not match channel count");
        for (float s : stddev)
            if (!(s > 0.0f))
                throw InvalidArgument("preprocessing stddev must be positive");
    }

    friend bool operator==(const Preprocessing &, const Preprocessing &) = default;
};

/// A convolutional classifier split at the global-average-pool boundary:
/// a trunk producing pre-pooling feature maps, followed by a linear head.
class Classifier
{
public:
    virtual ~Classifier() = default;

    virtual int   input_channels() const = 0;
    virtual Size2 input_size() const     = 0;
    virtual int   feature_count() const  = 0;
    virtual int   class_count() const    = 0;

    /// Pre-pooling activations (F, h', w') for a normalised input.
    virtual FeatureMaps feature_maps(const Image &normalized) const = 0;

    /// Row-major (class_count, feature_count).
    virtual std::span<const float> head_weights() const = 0;
    virtual std::span<const float> head_bias() const    = 0;

    virtual bool has_gradients() const { return false; }

    /// Gradient of sum(seed * feature_maps(x)) with respect to the normalised
    /// input x.
    virtual Image backward_maps(const Image & /*normalized*/, const FeatureMaps & /*seed*/) const
    {
        throw CapabilityError("classifier does not provide input gradients");
    }
};

/// Uniform handle over a classifier plus its preprocessing. Every public
/// entry point takes images in canonical [0,1] space.
class ModelBundle
{
public:
    ModelBundle(std::string identifier, std::shared_ptr<const Classifier> net, Preprocessing preprocessing)
        : identifier_(std::move(identifier))
        , net_(std::move(net))
        , preprocessing_(std::move(preprocessing))
    {
        if (!net_)
            throw InvalidArgument("model bundle without a network");
        if (net_->feature_count() <= 0)
            throw InvalidArgument("feature_count must be positive");
        if (net_->input_size().height <= 0 || net_->input_size().width <= 0)
            throw InvalidArgument("input_size must be positive");
        if (net_->head_weights().size()
            != static_cast<std::size_t>(net_->class_count()) * net_->feature_count())
            throw InvalidArgument("head weight matrix must be (num_classes, F)");
        if (net_->head_bias().size() != static_cast<std::size_t>(net_->class_count()))
            throw InvalidArgument("head bias must have num_classes entries");
        preprocessing_.check(net_->input_channels());
    }

    const std::string   &identifier() const noexcept { return identifier_; }
    Size2                input_size() const { return net_->input_size(); }
    int                  channels() const { return net_->input_channels(); }
    int                  feature_count() const { return net_->feature_count(); }
    int                  num_classes() const { return net_->class_count(); }
    bool                 gradients_available() const { return net_->has_gradients(); }
    const Preprocessing &preprocessing() const noexcept { return preprocessing_; }
    const Classifier    &net() const noexcept { return *net_; }

    void check_input(const Image &image, const std::string &image_id = "<unnamed>") const
    {
        if (image.channels != channels() || image.spatial() != input_size())
            throw InvalidArgument("image '" + image_id + "' has shape (" + std::to_string(image.channels) + ","
                                  + std::to_string(image.height) + "," + std::to_string(image.width)
                                  + "), model '" + identifier_ + "' expects (" + std::to_string(channels()) + ","
                                  + std::to_string(input_size().height) + "," + std::to_string(input_size().width)
                                  + ")");
    }

    FeatureMaps feature_maps(const Image &canonical) const
    {
        return net_->feature_maps(preprocessing_.apply(canonical));
    }

    std::vector<float> logits(std::span<const float> feature_vector) const
    {
        const int F = feature_count();
        if (static_cast<int>(feature_vector.size()) != F)
            throw InvalidArgument("feature vector length does not match the model");
        auto               w = net_->head_weights();
        auto               b = net_->head_bias();
        std::vector<float> out(static_cast<std::size_t>(num_classes()));
        for (int i = 0; i < num_classes(); ++i)
            out[i] = static_cast<float>(dot(w.subspan(static_cast<std::size_t>(i) * F, F), feature_vector) + b[i]);
        return out;
    }

private:
    std::string                       identifier_;
    std::shared_ptr<const Classifier> net_;
    Preprocessing                     preprocessing_;
};

/// Spatial mean of every channel.
inline std::vector<float> global_average_pool(const FeatureMaps &maps)
{
    std::vector<float> out(static_cast<std::size_t>(maps.channels));
    for (int j = 0; j < maps.channels; ++j)
    {
        double acc = 0.0;
        for (float v : maps.plane(j))
            acc += v;
        out[j] = static_cast<float>(acc / static_cast<double>(maps.plane_size()));
    }
    return out;
}

struct ActivationBatch
{
    std::vector<std::string>        image_ids;
    std::vector<FeatureMaps>        feature_maps;
    std::vector<std::vector<float>> feature_vectors;
    std::vector<std::vector<float>> logits;
    std::vector<int>                predicted;

    std::size_t size() const noexcept { return image_ids.size(); }
};

/// Forward pass for one image: feature vector, logits and predicted class.
struct Forward
{
    FeatureMaps        feature_maps;
    std::vector<float> feature_vector;
    std::vector<float> logits;
    int                predicted = 0;
};

inline Forward forward(const ModelBundle &model, const Image &image, const std::string &image_id = "<unnamed>")
{
    model.check_input(image, image_id);
    Forward f;
    f.feature_maps   = model.feature_maps(image);
    f.feature_vector = global_average_pool(f.feature_maps);
    f.logits         = model.logits(f.feature_vector);
    f.predicted      = static_cast<int>(argmax(f.logits));
    return f;
}

inline int classify(const ModelBundle &model, const Image &image)
{
    return forward(model, image).predicted;
}

inline ActivationBatch extract_activations(const ModelBundle &model, std::span<const std::string> image_ids,
                                           std::span<const Image> images)
{
    if (images.empty())
        throw InvalidArgument("extract_activations: empty batch");
    if (image_ids.size() != images.size())
        throw InvalidArgument("extract_activations: ids and images differ in length");

    for (std::size_t b = 0; b < images.size(); ++b)
        model.check_input(images[b], image_ids[b]);

    ActivationBatch batch;
    batch.image_ids.assign(image_ids.begin(), image_ids.end());
    for (std::size_t b = 0; b < images.size(); ++b)
    {
        Forward f = forward(model, images[b], image_ids[b]);
        batch.feature_maps.push_back(std::move(f.feature_maps));
        batch.feature_vectors.push_back(std::move(f.feature_vector));
        batch.logits.push_back(std::move(f.logits));
        batch.predicted.push_back(f.predicted);
    }
    return batch;
}

/// Row `class_index` of the final linear layer, w_{i,:}.
inline std::vector<float> head_row(const ModelBundle &model, int class_index)
{
    if (class_index < 0 || class_index >= model.num_classes())
        throw InvalidArgument("head_row: class index " + std::to_string(class_index) + " out of range [0, "
                              + std::to_string(model.num_classes()) + ")");
    const auto F   = static_cast<std::size_t>(model.feature_count());
    auto       row = model.net().head_weights().subspan(static_cast<std::size_t>(class_index) * F, F);
    return {row.begin(), row.end()};
}

inline double feature_value(const ModelBundle &model, const Image &image, int feature_index)
{
    if (feature_index < 0 || feature_index >= model.feature_count())
        throw InvalidArgument("feature index out of range");
    model.check_input(image);
    FeatureMaps maps = model.feature_maps(image);
    double      acc  = 0.0;
    for (float v : maps.plane(feature_index))
        acc += v;
    return acc / static_cast<double>(maps.plane_size());
}

/// d feature_vector[feature_index] / d image, in canonical pixel space.
inline Image input_gradient(const ModelBundle &model, const Image &image, int feature_index)
{
    if (!model.gradients_available())
        throw CapabilityError("model '" + model.identifier() + "' does not provide input gradients");
    if (feature_index < 0 || feature_index >= model.feature_count())
        throw InvalidArgument("feature index out of range");
    model.check_input(image);

    Image       normalized = model.preprocessing().apply(image);
    FeatureMaps shape      = model.net().feature_maps(normalized);
    FeatureMaps seed(shape.channels, shape.height, shape.width, 0.0f);
    const float w = 1.0f / static_cast<float>(seed.plane_size());
    for (float &v : seed.plane(feature_index))
        v = w;
    return model.preprocessing().unapply_gradient(model.net().backward_maps(normalized, seed));
}

} // namespace probe
