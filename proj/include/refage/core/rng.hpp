#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace refage {

/// splitmix64 finalizer; used to derive independent named streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_keys(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t k : keys) h = mix64(h ^ mix64(k));
  return h;
}

/// Stream tags; keep values stable, they are part of the generated bytes.
enum class Stream : std::uint64_t {
  kIdentity = 1,
  kImage = 2,
  kProjection = 3,
  kDomain = 4,
  kSource = 5,
  kSplit = 6,
  kTasks = 7,
  kSwap = 8,
  kEpisodes = 9,
  kInit = 10,
  kGlobalFit = 11,
};

using Rng = std::mt19937_64;

/// Deterministic generator for the entity named by (seed, stream, ids...).
inline Rng make_stream(std::uint64_t seed, Stream stream, std::initializer_list<std::uint64_t> ids = {}) {
  std::uint64_t h = hash_keys(seed, {static_cast<std::uint64_t>(stream)});
  for (std::uint64_t k : ids) h = mix64(h ^ mix64(k));
  return Rng(h);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double normal(Rng& rng, double mean = 0.0, double sd = 1.0) {
  return std::normal_distribution<double>(mean, sd)(rng);
}

}  // namespace refage
