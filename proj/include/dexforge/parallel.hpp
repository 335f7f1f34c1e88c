#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace dexforge {

// Runs fn(i) for i in [0, n) on up to `jobs` threads; each index runs on
// exactly one thread. The first exception by worker order is rethrown.
template <class F>
void parallel_for(int n, int jobs, const F& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (int w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += jobs) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace dexforge
