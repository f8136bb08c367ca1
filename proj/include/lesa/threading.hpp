#pragma once

#include <cstdint>
#include <functional>

namespace lesa {

// Deterministic data parallelism: parallel_for splits [0, n) into one
// contiguous chunk per worker, so every output element is written by exactly
// one thread and inner reduction order never depends on the thread count.
// Results are bitwise identical for any number of threads.
void set_num_threads(int n);
int num_threads();

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

}  // namespace lesa
