#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tbfm {

/// SplitMix64 finaliser; a bijection on 64-bit integers.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives a sub-seed from a base seed and a list of indices.
///
/// seed_0 = splitmix64(base); seed_{j+1} = splitmix64(seed_j ^ index_j).
/// Used for per-chunk, per-cell and per-batch streams so results never
/// depend on how work is scheduled.
constexpr std::uint64_t derive_seed(std::uint64_t base,
                                    std::initializer_list<std::uint64_t> indices) {
  std::uint64_t s = splitmix64(base);
  for (std::uint64_t i : indices) s = splitmix64(s ^ i);
  return s;
}

/// Seedable generator with standard-normal and uniform samplers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace tbfm
