#pragma once

#include <cstdint>
#include <functional>

namespace nudiff {

// Worker cap: hardware concurrency clamped by the NUDIFF_THREADS environment
// variable; always at least 1.
int worker_count();

// Runs fn(i) for i in [0,n), block-partitioned across worker_count() threads.
// Iterations must write to disjoint state.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace nudiff
