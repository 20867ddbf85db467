// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <probe/activation_cache.hpp>
#include <probe/rng.hpp>
#include <probe/tensor.hpp>

#include <nlohmann/json.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

namespace probe::testing {

class TempDir
{
public:
    TempDir()
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path()
                / ("probe-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &)            = delete;
    TempDir &operator=(const TempDir &) = delete;

    const std::filesystem::path &path() const noexcept { return path_; }
    std::filesystem::path        operator/(const std::string &p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

inline Image random_image(Rng &rng, int c, int h, int w)
{
    Image img(c, h, w);
    for (float &v : img.data)
        v = static_cast<float>(rng.uniform());
    return img;
}

inline Grid random_grid(Rng &rng, int h, int w)
{
    Grid g(h, w);
    for (float &v : g.data)
        v = static_cast<float>(rng.uniform());
    return g;
}

inline std::string image_id(int n)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "img%04d", n);
    return buf;
}

/// Independent double-precision forward pass of a tiny-net weights document:
/// normalise, three 3x3 convolutions (padding 1) with ReLU, global average
/// pool. Returns feature j.
inline double oracle_feature(const nlohmann::json &net, const std::vector<float> &mean,
                             const std::vector<float> &stddev, const std::vector<double> &chw, int channels, int height,
                             int width, int j)
{
    std::vector<double> x(chw.size());
    const std::size_t   plane = static_cast<std::size_t>(height) * width;
    for (std::size_t n = 0; n < chw.size(); ++n)
        x[n] = (chw[n] - mean[n / plane]) / stddev[n / plane];
    int c = channels, h = height, w = width;
    for (int l = 0; l < 3; ++l)
    {
        const auto  wt     = net["layers"][l]["weights"].get<std::vector<double>>();
        const auto  bias   = net["layers"][l]["bias"].get<std::vector<double>>();
        const int   stride = net["strides"][l].get<int>();
        const int   o      = static_cast<int>(bias.size());
        const int   oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;
        std::vector<double> y(static_cast<std::size_t>(o) * oh * ow);
        for (int k = 0; k < o; ++k)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx)
                {
                    double acc = bias[k];
                    for (int i = 0; i < c; ++i)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx)
                            {
                                const int iy = yy * stride + ky - 1, ix = xx * stride + kx - 1;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w)
                                    continue;
                                acc += wt[((static_cast<std::size_t>(k) * c + i) * 3 + ky) * 3 + kx]
                                       * x[(static_cast<std::size_t>(i) * h + iy) * w + ix];
                            }
                    y[(static_cast<std::size_t>(k) * oh + yy) * ow + xx] = std::max(acc, 0.0);
                }
        x = std::move(y);
        c = o, h = oh, w = ow;
    }
    double sum = 0.0;
    for (int p = 0; p < h * w; ++p)
        sum += x[static_cast<std::size_t>(j) * h * w + p];
    return sum / (h * w);
}

} // namespace probe::testing
