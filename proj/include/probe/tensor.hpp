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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace probe {

struct Size2
{
    int height = 0;
    int width  = 0;

    friend bool operator==(const Size2 &, const Size2 &) = default;
};

/// Dense channel-major (C, H, W) float tensor. Images live in the canonical
/// [0,1] pixel space; feature maps use the same layout with F channels.
struct Tensor3
{
    int                channels = 0;
    int                height   = 0;
    int                width    = 0;
    std::vector<float> data;

    Tensor3() = default;

    Tensor3(int c, int h, int w, float fill = 0.0f)
        : channels(c)
        , height(h)
        , width(w)
        , data(static_cast<std::size_t>(c) * h * w, fill)
    {
        if (c < 0 || h < 0 || w < 0)
            throw InvalidArgument("negative tensor dimension");
    }

    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const noexcept { return data.size(); }
    Size2       spatial() const noexcept { return {height, width}; }

    float &at(int c, int y, int x) noexcept
    {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    float at(int c, int y, int x) const noexcept
    {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    std::span<float> plane(int c) noexcept
    {
        return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
    }

    std::span<const float> plane(int c) const noexcept
    {
        return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
    }

    bool same_shape(const Tensor3 &o) const noexcept
    {
        return channels == o.channels && height == o.height && width == o.width;
    }

    friend bool operator==(const Tensor3 &, const Tensor3 &) = default;
};

using Image       = Tensor3;
using FeatureMaps = Tensor3;

/// Single-channel float grid (H, W), row-major.
struct Grid
{
    int                height = 0;
    int                width  = 0;
    std::vector<float> data;

    Grid() = default;

    Grid(int h, int w, float fill = 0.0f)
        : height(h)
        , width(w)
        , data(static_cast<std::size_t>(h) * w, fill)
    {
        if (h < 0 || w < 0)
            throw InvalidArgument("negative grid dimension");
    }

    Size2 size2() const noexcept { return {height, width}; }

    float &at(int y, int x) noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
    float  at(int y, int x) const noexcept { return data[static_cast<std::size_t>(y) * width + x]; }

    friend bool operator==(const Grid &, const Grid &) = default;
};

inline double l2_norm(std::span<const float> v) noexcept
{
    double acc = 0.0;
    for (float x : v)
        acc += static_cast<double>(x) * x;
    return std::sqrt(acc);
}

inline double dot(std::span<const float> a, std::span<const float> b)
{
    if (a.size() != b.size())
        throw InvalidArgument("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

/// Index of the maximum; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const float> v)
{
    if (v.empty())
        throw InvalidArgument("argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best])
            best = i;
    return best;
}

/// Bilinear resize with half-pixel centres and edge clamping (the
/// convention of OpenCV's INTER_LINEAR).
inline Grid resize_bilinear(const Grid &src, Size2 target)
{
    if (src.height <= 0 || src.width <= 0 || target.height <= 0 || target.width <= 0)
        throw InvalidArgument("resize_bilinear: empty source or target");

    Grid         out(target.height, target.width);
    const double sy = static_cast<double>(src.height) / target.height;
    const double sx = static_cast<double>(src.width) / target.width;

    for (int y = 0; y < target.height; ++y)
    {
        double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        int    y0 = static_cast<int>(fy);
        int    y1 = std::min(y0 + 1, src.height - 1);
        double wy = fy - y0;
        for (int x = 0; x < target.width; ++x)
        {
            double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            int    x0 = static_cast<int>(fx);
            int    x1 = std::min(x0 + 1, src.width - 1);
            double wx = fx - x0;

            double top    = src.at(y0, x0) * (1.0 - wx) + src.at(y0, x1) * wx;
            double bottom = src.at(y1, x0) * (1.0 - wx) + src.at(y1, x1) * wx;
            out.at(y, x)  = static_cast<float>(top * (1.0 - wy) + bottom * wy);
        }
    }
    return out;
}

} // namespace probe
