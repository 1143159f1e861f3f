#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace lcmf {

// Global worker cap for parallel_for. Every parallel site partitions disjoint
// output ranges and each element's arithmetic order is fixed, so results are
// bitwise identical for any thread count.
void set_worker_count(int n);
int worker_count();

// Calls fn(i) for i in [0, n). Splits into contiguous chunks when more than
// one worker is configured and the range is worth the thread overhead.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace lcmf
