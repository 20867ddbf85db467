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

#include "model.hpp"
#include "tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace probe {

/// Per-pixel weights in [0,1] locating one visual attribute in one image.
/// Non-degenerate masks span exactly [0,1]; a degenerate mask is all zero.
struct SoftMask
{
    Grid        values;
    int         source_feature = -1;
    std::string source_image;
    bool        degenerate = false;

    Size2 size() const noexcept { return values.size2(); }
};

/// Min-max normalisation to [0,1]. A constant input yields all zeros and
/// sets `degenerate`.
inline Grid normalize_min_max(const Grid &g, bool *degenerate = nullptr)
{
    Grid out(g.height, g.width, 0.0f);
    if (g.data.empty())
    {
        if (degenerate)
            *degenerate = true;
        return out;
    }
    const auto [lo_it, hi_it] = std::minmax_element(g.data.begin(), g.data.end());
    const double lo           = *lo_it;
    const double hi           = *hi_it;
    if (!(hi > lo))
    {
        if (degenerate)
            *degenerate = true;
        return out;
    }
    if (degenerate)
        *degenerate = false;
    const double span = hi - lo;
    for (std::size_t n = 0; n < g.data.size(); ++n)
        out.data[n] = static_cast<float>((g.data[n] - lo) / span);
    return out;
}

inline Grid channel_grid(const FeatureMaps &maps, int j)
{
    if (j < 0 || j >= maps.channels)
        throw InvalidArgument("feature index " + std::to_string(j) + " out of range [0, "
                              + std::to_string(maps.channels) + ")");
    Grid g(maps.height, maps.width);
    auto p = maps.plane(j);
    std::copy(p.begin(), p.end(), g.data.begin());
    return g;
}

/// Neural activation map of feature j: min-max normalise the pre-pooling
/// channel, resize bilinearly to `target`, and re-normalise so the resized
/// mask still spans [0,1].
inline SoftMask neural_activation_map(const FeatureMaps &maps, int j, Size2 target, std::string image_id = {})
{
    bool degenerate = false;
    Grid normalized = normalize_min_max(channel_grid(maps, j), &degenerate);

    SoftMask mask;
    mask.source_feature = j;
    mask.source_image   = std::move(image_id);
    mask.degenerate     = degenerate;
    if (degenerate)
    {
        mask.values = Grid(target.height, target.width, 0.0f);
        return mask;
    }
    Grid resized = resize_bilinear(normalized, target);
    // Upsampling with half-pixel centres can miss an interior extreme.
    mask.values = normalize_min_max(resized, &mask.degenerate);
    return mask;
}

/// Piecewise-linear jet colormap, v in [0,1] -> (R, G, B).
inline std::array<float, 3> jet(float v) noexcept
{
    auto ramp = [](double t) { return static_cast<float>(std::clamp(1.5 - std::abs(t), 0.0, 1.0)); };
    const double x = 4.0 * static_cast<double>(v);
    return {ramp(x - 3.0), ramp(x - 2.0), ramp(x - 1.0)};
}

/// jet(mask) + image, divided by the global maximum. A grayscale image is
/// broadcast to the three colour channels.
inline Image heatmap_overlay(const Image &image, const SoftMask &mask)
{
    if (image.spatial() != mask.size())
        throw InvalidArgument("heatmap_overlay: mask is " + std::to_string(mask.size().height) + "x"
                              + std::to_string(mask.size().width) + ", image is " + std::to_string(image.height)
                              + "x" + std::to_string(image.width));
    if (image.channels != 3 && image.channels != 1)
        throw InvalidArgument("heatmap_overlay: image must have 1 or 3 channels");

    Image             out(3, image.height, image.width);
    const std::size_t plane = out.plane_size();
    for (std::size_t p = 0; p < plane; ++p)
    {
        const auto rgb = jet(mask.values.data[p]);
        for (int c = 0; c < 3; ++c)
            out.data[c * plane + p] = rgb[c] + image.data[(image.channels == 3 ? c : 0) * plane + p];
    }
    const float top = *std::max_element(out.data.begin(), out.data.end());
    if (top > 0.0f)
        for (float &v : out.data)
            v /= top;
    return out;
}

struct AttackConfig
{
    double step_size  = 40.0;
    int    iterations = 25;
    double rho        = 500.0;

    void validate() const
    {
        if (!(step_size > 0.0) || iterations < 0 || !(rho > 0.0))
            throw InvalidArgument("attack config requires step_size > 0, iterations >= 0, rho > 0");
    }
};

/// Normalised-gradient ascent on feature j inside the pixel-space l2 ball of
/// radius rho around `image`, clipping pixels to [0,1] after every step.
/// Returns the iterate with the highest feature value, so the result never
/// scores below the input.
inline Image feature_attack(const ModelBundle &model, const Image &image, int j, const AttackConfig &config)
{
    config.validate();
    if (!model.gradients_available())
        throw CapabilityError("feature_attack: model '" + model.identifier() + "' has no input gradients");
    model.check_input(image);

    Image  best       = image;
    double best_value = config.iterations > 0 ? feature_value(model, image, j) : 0.0;
    Image  current    = image;

    for (int it = 0; it < config.iterations; ++it)
    {
        Image        grad = input_gradient(model, current, j);
        const double norm = l2_norm(grad.data);
        if (!(norm > 0.0))
            break;

        const double scale = config.step_size / norm;
        Image        delta(image.channels, image.height, image.width);
        for (std::size_t n = 0; n < delta.size(); ++n)
            delta.data[n] = static_cast<float>(current.data[n] + scale * grad.data[n] - image.data[n]);

        const double dn = l2_norm(delta.data);
        if (dn > config.rho)
        {
            const double shrink = config.rho / dn;
            for (float &v : delta.data)
                v = static_cast<float>(v * shrink);
        }
        for (std::size_t n = 0; n < delta.size(); ++n)
            current.data[n] = std::clamp(image.data[n] + delta.data[n], 0.0f, 1.0f);

        const double value = feature_value(model, current, j);
        if (value > best_value)
        {
            best_value = value;
            best       = current;
        }
    }
    return best;
}

} // namespace probe
