#ifndef STNALIGN_PARALLEL_HPP_
#define STNALIGN_PARALLEL_HPP_

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace stnalign {

/// Worker count: STN_ALIGN_THREADS if set, else hardware concurrency (at least 1).
inline std::size_t default_workers() {
  if (const char* env = std::getenv("STN_ALIGN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/**
 * Splits [0, count) into `workers` contiguous chunks and calls fn(worker, begin, end)
 * for each. Chunk boundaries depend only on (count, workers), so reductions done in
 * worker order are reproducible for a fixed worker count.
 */
template <typename Fn>
void parallel_chunks(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    fn(std::size_t{0}, std::size_t{0}, count);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = count * w / workers, end = count * (w + 1) / workers;
    threads.emplace_back([&, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace stnalign

#endif  // STNALIGN_PARALLEL_HPP_
