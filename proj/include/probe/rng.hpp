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

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace probe {

/// std::mt19937_64 with portable conversions. The standard distributions
/// are implementation-defined, so uniform and normal draws are derived here
/// to keep seeded outputs identical across standard libraries.
class Rng
{
public:
    explicit Rng(std::uint64_t seed)
        : engine_(mix(seed))
    {
    }

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n)
    {
        if (n == 0)
            throw InvalidArgument("below(0)");
        // Rejection keeps the draw unbiased.
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t       v;
        do
            v = engine_();
        while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller; draws come in pairs.
    double normal()
    {
        if (has_spare_)
        {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0)
            u1 = uniform();
        const double u2 = uniform();
        const double r  = std::sqrt(-2.0 * std::log(u1));
        const double t  = 2.0 * std::numbers::pi * u2;
        spare_          = r * std::sin(t);
        has_spare_      = true;
        return r * std::cos(t);
    }

    /// SplitMix64 finaliser; spreads nearby seeds before seeding the engine.
    static constexpr std::uint64_t mix(std::uint64_t z) noexcept
    {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    double          spare_     = 0.0;
    bool            has_spare_ = false;
};

/// Seed of the noise stream for one image: depends only on (seed, image_id).
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::string_view image_id) noexcept
{
    return Rng::mix(seed) ^ fnv1a64(image_id);
}

} // namespace probe
