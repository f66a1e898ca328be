#pragma once

#include <cstdint>

#include "difftx/diffusion.hpp"

namespace difftx {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Stream purposes, so one (seed, index) pair can feed several independent
/// streams without correlation.
enum class StreamDomain : std::uint64_t {
  kTranscript = 1,
  kFeatures = 2,
  kCodebook = 3,
  kDecode = 4,
  kTrain = 5,
  kInit = 6,
};

inline Rng make_stream(std::uint64_t seed, std::uint64_t index, StreamDomain domain) {
  return Rng(splitmix64(splitmix64(seed ^ index) ^ static_cast<std::uint64_t>(domain)));
}

}  // namespace difftx
