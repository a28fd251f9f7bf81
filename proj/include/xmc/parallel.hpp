#pragma once

#include <cstddef>
#include <functional>

namespace xmc {

// Worker count: hardware concurrency, capped by the XMC_THREADS environment
// variable when set. Always at least 1.
unsigned worker_thread_count();

// Runs fn(i) for every i in [0, n), distributing contiguous chunks across
// workers. Each index is visited exactly once; callers keep determinism by
// writing to disjoint, index-addressed slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace xmc
