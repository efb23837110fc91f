#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace tbfm {

/// Fixed partition of [0, total) into chunks of `chunk_size` items.
///
/// The partition depends only on (total, chunk_size), never on the number of
/// workers, so per-chunk seeds and per-chunk partial results are stable.
struct ChunkPlan {
  std::size_t total = 0;
  std::size_t chunk_size = 1;

  std::size_t count() const { return total == 0 ? 0 : (total + chunk_size - 1) / chunk_size; }
  std::size_t begin(std::size_t c) const { return c * chunk_size; }
  std::size_t end(std::size_t c) const { return std::min(total, (c + 1) * chunk_size); }
};

inline unsigned resolve_jobs(unsigned jobs) {
  if (jobs != 0) return jobs;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(c) for every c in [0, n_tasks) on up to `jobs` threads (0 = all cores).
/// The first exception thrown by any task is rethrown on the caller.
template <class Fn>
void parallel_for(std::size_t n_tasks, unsigned jobs, Fn&& fn) {
  const unsigned workers = static_cast<unsigned>(
      std::min<std::size_t>(resolve_jobs(jobs), std::max<std::size_t>(n_tasks, 1)));
  if (workers <= 1) {
    for (std::size_t c = 0; c < n_tasks; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= n_tasks) return;
      try {
        fn(c);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n_tasks);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace tbfm
