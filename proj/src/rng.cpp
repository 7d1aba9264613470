#include "gal/rng.hpp"

#include <cmath>

namespace gal {

double Rng::normal() {
  // u1 is nudged away from 0 so log() stays finite.
  double u1 = uniform();
  if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
  double u2 = uniform();
  const double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> tags) {
  uint64_t state = base ^ 0xd1b54a32d192ed03ull;
  uint64_t out = splitmix64(state);
  for (uint64_t t : tags) {
    state ^= t;
    out = splitmix64(state);
  }
  return out;
}

}  // namespace gal
