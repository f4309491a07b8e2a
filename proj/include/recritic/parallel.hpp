#ifndef RECRITIC_PARALLEL_HPP
#define RECRITIC_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace recritic {

/// Calls fn(i) for every i in [0, count) on up to `workers` threads. The first
/// exception thrown by fn stops further work and is rethrown here.
template <typename Fn>
void parallel_for(std::size_t count, int workers, Fn&& fn) {
  const auto threads =
      std::min<std::size_t>(count, static_cast<std::size_t>(std::max(workers, 1)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(fatal_mutex);
            if (!fatal) fatal = std::current_exception();
            next = count;
          }
        }
      });
    }
  }
  if (fatal) std::rethrow_exception(fatal);
}

}  // namespace recritic

#endif  // RECRITIC_PARALLEL_HPP
