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

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace probe {

/// 8-bit quantisation used for every persisted mask: round(255 * v).
inline std::uint8_t quantize_unit(float v) noexcept
{
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

namespace detail {

inline void write_png(const std::filesystem::path &path, int width, int height, png_uint_32 format,
                      const std::vector<std::uint8_t> &pixels)
{
    if (!path.parent_path().empty())
        std::filesystem::create_directories(path.parent_path());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width   = static_cast<png_uint_32>(width);
    img.height  = static_cast<png_uint_32>(height);
    img.format  = format;
    if (!png_image_write_to_file(&img, path.c_str(), 0, pixels.data(), 0, nullptr))
        throw IoError("png write failed for " + path.string() + ": " + img.message);
}

inline std::vector<std::uint8_t> read_png(const std::filesystem::path &path, png_uint_32 format, int &width,
                                          int &height)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw IoError("png read failed for " + path.string() + ": " + img.message);
    img.format = format;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr))
    {
        png_image_free(&img);
        throw IoError("png decode failed for " + path.string() + ": " + img.message);
    }
    width  = static_cast<int>(img.width);
    height = static_cast<int>(img.height);
    return pixels;
}

} // namespace detail

inline void write_mask_png(const std::filesystem::path &path, const Grid &mask)
{
    std::vector<std::uint8_t> px(mask.data.size());
    std::transform(mask.data.begin(), mask.data.end(), px.begin(), quantize_unit);
    detail::write_png(path, mask.width, mask.height, PNG_FORMAT_GRAY, px);
}

inline Grid read_mask_png(const std::filesystem::path &path)
{
    int  w = 0, h = 0;
    auto px = detail::read_png(path, PNG_FORMAT_GRAY, w, h);
    Grid g(h, w);
    for (std::size_t n = 0; n < px.size(); ++n)
        g.data[n] = static_cast<float>(px[n]) / 255.0f;
    return g;
}

/// RGB (or single-channel) image in [0,1] to an 8-bit PNG.
inline void write_image_png(const std::filesystem::path &path, const Image &image)
{
    if (image.channels != 3 && image.channels != 1)
        throw InvalidArgument("write_image_png: only 1 or 3 channel images");
    std::vector<std::uint8_t> px(image.size());
    const std::size_t         plane = image.plane_size();
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < image.channels; ++c)
            px[p * image.channels + c] = quantize_unit(image.data[c * plane + p]);
    detail::write_png(path, image.width, image.height, image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY, px);
}

inline Image read_image_png(const std::filesystem::path &path)
{
    int         w = 0, h = 0;
    auto        px = detail::read_png(path, PNG_FORMAT_RGB, w, h);
    Image       out(3, h, w);
    std::size_t plane = out.plane_size();
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c)
            out.data[c * plane + p] = static_cast<float>(px[p * 3 + c]) / 255.0f;
    return out;
}

inline std::string read_file_bytes(const std::filesystem::path &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path &path, const std::string &bytes)
{
    if (!path.parent_path().empty())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("cannot write " + path.string());
}

inline std::string file_checksum(const std::filesystem::path &path)
{
    return hex64(fnv1a64(read_file_bytes(path)));
}

} // namespace probe
