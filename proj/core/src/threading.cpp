#include "latitude/threading.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace latitude {

int max_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("LATITUDE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, cap);
  }
  return hw;
}

std::size_t num_blocks(std::size_t n, std::size_t grain) {
  if (n == 0) return 0;
  if (grain == 0) grain = 1;
  return (n + grain - 1) / grain;
}

BlockRange block_range(std::size_t n, std::size_t grain, std::size_t block) {
  if (grain == 0) grain = 1;
  const std::size_t begin = block * grain;
  return {begin, std::min(n, begin + grain)};
}

void parallel_blocks(std::size_t n, std::size_t grain,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const std::size_t blocks = num_blocks(n, grain);
  if (blocks == 0) return;
  const int workers = std::min<std::size_t>(max_threads(), blocks);
  if (workers <= 1) {
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto r = block_range(n, grain, b);
      fn(b, r.begin, r.end);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t b = next.fetch_add(1);
      if (b >= blocks) return;
      const auto r = block_range(n, grain, b);
      fn(b, r.begin, r.end);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int i = 1; i < workers; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t grain) {
  parallel_blocks(n, grain, [&fn](std::size_t, std::size_t b, std::size_t e) { fn(b, e); });
}

}  // namespace latitude
