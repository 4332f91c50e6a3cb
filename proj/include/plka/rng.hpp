#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace plka {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a master seed and a path of
// indices, so content never depends on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(master);
  for (const auto p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ull));
  return s;
}

// Stream tags for derive_seed.
enum class Stream : std::uint64_t { kInit = 1, kTrain = 2, kEval = 3, kSweep = 4, kGradcheck = 5 };

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::initializer_list<std::uint64_t> path = {}) {
  std::uint64_t s = derive_seed(master, {static_cast<std::uint64_t>(stream)});
  for (const auto p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ull));
  return s;
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace plka
