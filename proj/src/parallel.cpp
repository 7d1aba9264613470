#include "gal/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace gal {

int worker_count() {
  static const int n = [] {
    if (const char* env = std::getenv("GAL_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
  }();
  return n;
}

void parallel_for(int64_t n, int64_t min_grain, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = worker_count();
  if (workers <= 1 || n < 2 * std::max<int64_t>(min_grain, 1)) {
    fn(0, n);
    return;
  }
  int64_t parts = std::min<int64_t>(workers, (n + min_grain - 1) / std::max<int64_t>(min_grain, 1));
  int64_t chunk = (n + parts - 1) / parts;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(parts - 1));
  for (int64_t p = 1; p < parts; ++p) {
    int64_t b = p * chunk;
    int64_t e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min<int64_t>(chunk, n));
  for (auto& t : threads) t.join();
}

}  // namespace gal
