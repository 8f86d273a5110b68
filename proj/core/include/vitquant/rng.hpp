#pragma once

#include <cstdint>
#include <string_view>

namespace vitquant {

// Deterministic pseudo-random source. Distributions are implemented by hand
// (not via <random> distribution objects) so that a given seed produces the
// same stream on every standard library implementation; run reproducibility
// is a hard requirement of the pipeline.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next_u64() {
    // splitmix64; passes standard statistical batteries and is trivially
    // portable.
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], both ends inclusive.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
  }

  // Standard normal via Box-Muller (no cached spare: keeps the stream
  // position a pure function of the draw count).
  double normal(double mean, double stddev);

  // Derive an independent stream for a named sub-task of `seed`.
  static std::uint64_t derive(std::uint64_t seed, std::string_view tag);

 private:
  std::uint64_t state_;
};

}  // namespace vitquant
