#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace medmix {

/// Purposes that partition the random stream. Adding a value here never
/// shifts the draws of existing purposes.
enum class RngPurpose : std::uint64_t {
  init = 1,
  shuffle = 2,
  dropout = 3,
  corruption_train = 4,
  corruption_test = 5,
  synthetic = 6,
  partition = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Folds a key tuple into one 64-bit value. Order sensitive.
inline std::uint64_t mix_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

/// Uniform draw in [0, 1) that depends only on the key.
inline double keyed_uniform(std::uint64_t key) {
  return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::initializer_list<std::uint64_t> parts) {
  return Rng(mix_key(parts));
}

}  // namespace medmix
