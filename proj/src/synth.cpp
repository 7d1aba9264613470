#include "gal/synth.hpp"

#include <algorithm>
#include <cmath>

#include "gal/errors.hpp"
#include "gal/rng.hpp"

namespace gal {

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

// Seven-segment layout in a unit box (x right, y down).
constexpr Segment kSegments[7] = {
    {0.30, 0.15, 0.70, 0.15},  // A top
    {0.70, 0.15, 0.70, 0.50},  // B upper right
    {0.70, 0.50, 0.70, 0.85},  // C lower right
    {0.30, 0.85, 0.70, 0.85},  // D bottom
    {0.30, 0.50, 0.30, 0.85},  // E lower left
    {0.30, 0.15, 0.30, 0.50},  // F upper left
    {0.30, 0.50, 0.70, 0.50},  // G middle
};

// Segment sets for digits 0..9, bit i = kSegments[i].
constexpr unsigned kDigit[10] = {
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8
    0b1101111,  // 9: ABCDFG
};

double dist_to_segment(double x, double y, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = ((x - s.x0) * dx + (y - s.y0) * dy) / len2;
  t = std::clamp(t, 0.0, 1.0);
  const double px = s.x0 + t * dx - x, py = s.y0 + t * dy - y;
  return std::sqrt(px * px + py * py);
}

}  // namespace

ImageSet synth_digits(int count, uint64_t seed, const SynthOptions& opt) {
  if (count <= 0) throw ConfigError("synth: need a positive sample count");
  if (opt.side < 6) throw ConfigError("synth: side below 6 pixels leaves no room for a glyph");
  if (opt.noise < 0) throw ConfigError("synth: negative noise level");

  Rng rng(derive_seed(seed, {tag("synth")}));
  const int side = opt.side;
  const double thick = std::max(0.055, 0.75 / side);
  const double edge = std::max(0.025, 0.5 / side);

  ImageSet set;
  set.images = Tensor({count, 1, side, side});
  set.labels.resize(static_cast<size_t>(count));
  double* out = set.images.data();

  for (int i = 0; i < count; ++i) {
    const int digit = static_cast<int>(rng.below(10));
    set.labels[static_cast<size_t>(i)] = digit;
    const double theta = rng.uniform(-0.15, 0.15);
    const double sx = rng.uniform(0.85, 1.18), sy = rng.uniform(0.85, 1.18);
    const double tx = rng.uniform(-0.09, 0.09), ty = rng.uniform(-0.09, 0.09);
    const double bright = rng.uniform(0.75, 1.0);
    const double c = std::cos(theta), s = std::sin(theta);
    const unsigned segs = kDigit[digit];

    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        // map the pixel center back into the glyph frame
        const double px = (x + 0.5) / side - 0.5 - tx;
        const double py = (y + 0.5) / side - 0.5 - ty;
        const double gx = (c * px + s * py) / sx + 0.5;
        const double gy = (-s * px + c * py) / sy + 0.5;
        double d = 1e9;
        for (int k = 0; k < 7; ++k)
          if (segs & (1u << k)) d = std::min(d, dist_to_segment(gx, gy, kSegments[k]));
        double v = bright * std::clamp((thick - d) / edge + 1.0, 0.0, 1.0);
        if (opt.noise > 0) v += rng.normal(0.0, opt.noise);
        v = std::clamp(v, 0.0, 1.0);
        *out++ = std::round(v * 255.0) / 255.0;
      }
    }
  }
  return set;
}

}  // namespace gal
