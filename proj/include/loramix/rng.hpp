#pragma once

#include <cstdint>
#include <initializer_list>

namespace loramix {

/// Mixes a base seed with a path of indices (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
    auto mix = [](std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(base);
    for (auto p : path) h = mix(h ^ mix(p + 0x632BE59BD9B4E019ull));
    return h;
}

}  // namespace loramix
