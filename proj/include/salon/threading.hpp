// Deterministic parallel-for: static block partition, fixed merge order.
#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace salon {

inline int default_thread_count() {
  if (const char* env = std::getenv("SALON_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? int(hw) : 1;
}

inline int& thread_count() {
  static int n = default_thread_count();
  return n;
}

inline void set_thread_count(int n) { thread_count() = std::max(1, n); }

// Runs fn(begin, end) over a static partition of [0, n). Worker w always
// receives the same contiguous block for a given (n, threads), so any
// per-worker accumulation can be merged in worker order deterministically.
template <typename Fn>
inline void parallel_blocks(size_t n, Fn&& fn) {
  int workers = std::min<size_t>(thread_count(), n ? n : 1);
  if (workers <= 1 || n == 0) {
    fn(0, size_t(0), n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    size_t begin = std::min(n, size_t(w) * chunk);
    size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&fn, w, begin, end] { fn(w, begin, end); });
  }
  for (auto& t : pool) t.join();
}

template <typename Fn>
inline void parallel_for(size_t n, Fn&& fn) {
  parallel_blocks(n, [&fn](int, size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) fn(i);
  });
}

}  // namespace salon
