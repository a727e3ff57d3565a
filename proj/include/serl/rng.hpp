#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace serl {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t salt) {
  return splitmix64(root ^ splitmix64(salt + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view salt) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : salt) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return derive_seed(root, h);
}

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

}  // namespace serl
