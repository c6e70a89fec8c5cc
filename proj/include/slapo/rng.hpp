// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace slapo {

// Counter-based deterministic RNG. Every random draw is a pure function of
// (seed, stream, index), so recompute during checkpointing and replay across
// ranks produce identical values.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

/// Derive a subsystem seed from the user seed and a fixed label.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = splitmix64(seed);
    for (char c : label) h = hash_combine(h, static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return h;
}

/// Uniform in [0, 1).
inline double uniform01(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::uint64_t h = splitmix64(hash_combine(hash_combine(seed, stream), index));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller over two counter draws.
inline double normal01(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    double u1 = uniform01(seed, stream, 2 * index);
    double u2 = uniform01(seed, stream, 2 * index + 1);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace slapo
