#include "lcmf/parallel.hpp"

#include <algorithm>
#include <atomic>

namespace lcmf {

namespace {
std::atomic<int> g_workers{1};
}

void set_worker_count(int n) {
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = std::max(1, hw);
  g_workers.store(std::max(1, n));
}

int worker_count() { return g_workers.load(); }

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int workers = g_workers.load();
  if (workers <= 1 || n < 2 * workers) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int used = static_cast<int>(std::min<int64_t>(workers, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(used - 1));
  auto run_chunk = [&](int w) {
    const int64_t lo = n * w / used;
    const int64_t hi = n * (w + 1) / used;
    for (int64_t i = lo; i < hi; ++i) fn(i);
  };
  for (int w = 1; w < used; ++w) pool.emplace_back(run_chunk, w);
  run_chunk(0);
  for (auto& t : pool) t.join();
}

}  // namespace lcmf
