#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hpt {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Every stochastic site owns a stream keyed by (master seed, label), so adding
// new sites or sweep cells never shifts the numbers drawn elsewhere.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  return splitmix64(master ^ splitmix64(fnv1a(label)));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, std::string_view label) {
  return Rng(derive_seed(master, label));
}

}  // namespace hpt
