#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace stepwise {

// Splits [0, n) into contiguous chunks, one thread per chunk. Each index is
// visited exactly once, so writes to disjoint outputs are race free and the
// result does not depend on the thread count. Runs serially for small n or
// when only one core is available.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  const std::int64_t max_threads = static_cast<std::int64_t>(hw);
  const std::int64_t grain = 1024;
  std::int64_t threads = std::min<std::int64_t>(max_threads, (n + grain - 1) / grain);
  if (threads <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  const std::int64_t chunk = (n + threads - 1) / threads;
  for (std::int64_t t = 0; t < threads; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace stepwise
