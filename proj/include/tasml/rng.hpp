#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tasml {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for a named sub-stream, e.g. derive_seed(seed, {kTagAdapt, task_index}).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t s = mix64(seed);
  for (auto p : path) s = mix64(s ^ mix64(p + 0x51ed270b27a1f1c3ULL));
  return s;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {}) {
  return Rng(derive_seed(seed, path));
}

// Stream tags.
inline constexpr std::uint64_t kTagTaskgen = 1;
inline constexpr std::uint64_t kTagGeometry = 2;
inline constexpr std::uint64_t kTagThetaInit = 3;
inline constexpr std::uint64_t kTagErmBatches = 4;
inline constexpr std::uint64_t kTagAdapt = 5;
inline constexpr std::uint64_t kTagProjection = 6;
inline constexpr std::uint64_t kTagEpisodes = 7;

} // namespace tasml
