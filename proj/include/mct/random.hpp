#pragma once

#include <cstdint>
#include <random>

namespace mct {

using Rng = std::mt19937_64;

// Per-episode seed derived from a master seed (splitmix64 finalizer), so
// episodes can be generated in any order or in parallel.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace mct
