#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace culab {

using Rng = std::mt19937_64;

// Independent stream seed for (seed, purpose) so that consumers never share
// generator state. FNV-1a over the tag, mixed with splitmix64.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::string_view tag) { return Rng(derive_seed(seed, tag)); }

}  // namespace culab
