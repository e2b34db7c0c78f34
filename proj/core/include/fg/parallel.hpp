#pragma once

#include <cstddef>
#include <functional>

namespace fg {

/// Worker cap: FG_THREADS when set to a positive integer, else hardware concurrency.
std::size_t thread_budget();

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers must write
/// results to per-index slots and reduce afterwards in index order, so results
/// do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads = thread_budget());

}  // namespace fg
