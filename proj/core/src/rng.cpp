#include "vitquant/rng.hpp"

#include <cmath>
#include <numbers>

namespace vitquant {

double Rng::normal(double mean, double stddev) {
  // Box-Muller, one output per pair of uniforms.
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::derive(std::uint64_t seed, std::string_view tag) {
  // FNV-1a over the tag, folded into the seed through splitmix.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  Rng mixer(seed ^ h);
  return mixer.next_u64();
}

}  // namespace vitquant
