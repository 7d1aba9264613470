#pragma once

#include <cstdint>

#include "gal/data.hpp"

namespace gal {

struct SynthOptions {
  int side = 28;        // square image side in pixels
  double noise = 0.04;  // per-pixel gaussian noise stddev
};

// Deterministic stand-in for handwritten digits: ten segment-display glyphs
// rendered with a random affine jitter (shift, per-axis scale, rotation),
// random stroke brightness and pixel noise. The whole set is a pure function
// of (count, seed, options), and every pixel lands on the byte grid k/255 so
// an IDX save/load round-trips bit for bit.
ImageSet synth_digits(int count, uint64_t seed, const SynthOptions& opt = {});

}  // namespace gal
