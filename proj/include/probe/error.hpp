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

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace probe {

/// Base of every error raised by the toolkit. `code()` is a stable,
/// machine-readable tag that the CLI reports in its error JSON.
class Error : public std::runtime_error
{
public:
    Error(std::string code, const std::string &message)
        : std::runtime_error(message)
        , code_(std::move(code))
    {
    }

    const std::string &code() const noexcept { return code_; }

private:
    std::string code_;
};

struct InvalidArgument : Error
{
    explicit InvalidArgument(const std::string &message)
        : Error("invalid_argument", message)
    {
    }
};

struct CapabilityError : Error
{
    explicit CapabilityError(const std::string &message)
        : Error("capability", message)
    {
    }
};

struct EmptySubsetError : Error
{
    explicit EmptySubsetError(const std::string &message)
        : Error("empty_subset", message)
    {
    }
};

struct ConflictError : Error
{
    explicit ConflictError(const std::string &message)
        : Error("conflict", message)
    {
    }
};

struct NotFoundError : Error
{
    explicit NotFoundError(const std::string &message)
        : Error("not_found", message)
    {
    }
};

struct IoError : Error
{
    explicit IoError(const std::string &message)
        : Error("io", message)
    {
    }
};

// FNV-1a, 64 bit. Used for noise seeding and file checksums; not a
// cryptographic hash.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t    state = 0xcbf29ce484222325ULL) noexcept
{
    for (unsigned char c : bytes)
    {
        state ^= c;
        state *= 0x100000001b3ULL;
    }
    return state;
}

inline std::string hex64(std::uint64_t value)
{
    static constexpr char digits[] = "0123456789abcdef";
    std::string           out(16, '0');
    for (int i = 15; i >= 0; --i)
    {
        out[static_cast<std::size_t>(i)] = digits[value & 0xF];
        value >>= 4;
    }
    return out;
}

} // namespace probe
