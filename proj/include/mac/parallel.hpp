#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace mac {

// Splits [0, total) into contiguous ranges whose sizes differ by at most one
// and runs fn(begin, end) on each. The partition depends only on (total,
// threads), never on scheduling, so results of range-local work are stable.
// The first exception (by partition order) is rethrown after all joins.
template <typename Fn>
void run_partitioned(std::size_t total, std::size_t threads, Fn&& fn) {
  if (total == 0) return;
  const std::size_t parts = std::clamp<std::size_t>(threads, 1, total);
  if (parts == 1) {
    fn(std::size_t{0}, total);
    return;
  }
  const std::size_t base = total / parts;
  const std::size_t extra = total % parts;
  std::vector<std::thread> pool;
  pool.reserve(parts);
  std::vector<std::exception_ptr> errors(parts);
  std::size_t begin = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t end = begin + base + (p < extra ? 1 : 0);
    pool.emplace_back([&fn, &errors, p, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        errors[p] = std::current_exception();
      }
    });
    begin = end;
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace mac
