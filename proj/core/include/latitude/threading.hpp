// Block-structured parallelism with a deterministic reduction contract.
//
// Work is split into fixed-size blocks indexed 0..num_blocks-1 regardless of
// how many worker threads run, so callers that accumulate per-block partial
// results and reduce them in block order get bit-identical sums for any
// thread count. LATITUDE_THREADS caps the worker count.

#pragma once

#include <cstddef>
#include <functional>

namespace latitude {

// Effective worker count: min(hardware_concurrency, LATITUDE_THREADS).
int max_threads();

struct BlockRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

std::size_t num_blocks(std::size_t n, std::size_t grain);
BlockRange block_range(std::size_t n, std::size_t grain, std::size_t block);

// Runs fn(block_index, begin, end) for every block; blocks may execute on
// any thread and in any order.
void parallel_blocks(std::size_t n, std::size_t grain,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

// Convenience element-range form without block bookkeeping.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t grain = 1024);

}  // namespace latitude
