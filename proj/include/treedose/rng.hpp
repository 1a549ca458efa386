#pragma once

#include <cstdint>
#include <random>

namespace treedose {

using Rng = std::mt19937_64;

// SplitMix64 step, used to derive independent substream seeds from a master
// seed. Chains use stream ids 0..n_chains-1, LOCO folds use 1000+fold, the
// synthetic generator uses the raw seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline Rng make_stream(std::uint64_t master_seed, std::uint64_t stream_id) {
    std::uint64_t s = master_seed;
    std::uint64_t a = splitmix64(s);
    s ^= stream_id * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL;
    std::uint64_t b = splitmix64(s);
    return Rng(a ^ (b << 1) ^ stream_id);
}

}  // namespace treedose
