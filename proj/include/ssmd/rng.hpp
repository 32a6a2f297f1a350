#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

namespace ssmd {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Every random draw in the system comes from a generator derived statelessly
// from (root seed, stream name, coordinates). Resuming a run therefore needs
// no RNG state in the checkpoint: the coordinates (iteration, sample slot)
// regenerate the exact stream.
inline std::mt19937_64 make_rng(std::uint64_t root, std::string_view stream,
                                std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = root;
  s ^= splitmix64(s) + fnv1a(stream);
  s ^= splitmix64(s) + a;
  s ^= splitmix64(s) + b;
  return std::mt19937_64(splitmix64(s));
}

inline std::vector<int> random_permutation(int n, std::mt19937_64& rng) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> d(0, i);
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(d(rng))]);
  }
  return p;
}

}  // namespace ssmd
