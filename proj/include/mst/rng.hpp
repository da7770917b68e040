#pragma once

#include <cstdint>
#include <random>

namespace mst {

// splitmix64; used to derive independent stream seeds from one master seed.
inline uint64_t mix_seed(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
    return mix_seed(master ^ mix_seed(stream + 1));
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(mix_seed(seed)); }

}  // namespace mst
