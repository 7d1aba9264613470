#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace gal {

// Deterministic random stream. All distributions are sampled by explicit
// formulas on raw 64-bit draws (never std::*_distribution, whose output is
// implementation-defined), so a (seed, draw-count) pair pins every value and
// checkpoints only need to record seeds and counters.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1): top 53 bits of one draw.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller, one value per call (the sine companion is
  // discarded so no hidden state survives between calls).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n) by rejection-free modulo of a 64-bit draw; the
  // bias is ~n/2^64 and irrelevant at the sizes used here.
  int64_t below(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

  // Fisher-Yates with pinned draw order.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = below(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// splitmix64 step; used to whiten seed material.
uint64_t splitmix64(uint64_t& state);

// Collapses (base seed, tag words) into one stream seed. Tags keep independent
// consumers (weight init, data order, dropout, ...) on non-overlapping streams.
uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> tags);

// Small helper for tagging streams by purpose without a string table.
constexpr uint64_t tag(const char* s) {
  uint64_t h = 1469598103934665603ull;
  for (; *s; ++s) h = (h ^ static_cast<uint64_t>(*s)) * 1099511628211ull;
  return h;
}

}  // namespace gal
