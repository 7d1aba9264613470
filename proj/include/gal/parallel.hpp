#pragma once

#include <cstdint>
#include <functional>

namespace gal {

// Number of worker threads used by parallel_for. Defaults to the hardware
// count; the GAL_THREADS environment variable overrides it. Results never
// depend on this value: work is split by output ownership, so each element is
// written by exactly one thread with the same per-element arithmetic as the
// serial loop.
int worker_count();

// Runs fn(begin, end) over a static partition of [0, n). Falls back to a plain
// call when a single worker is configured or the range is below min_grain.
void parallel_for(int64_t n, int64_t min_grain, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace gal
