#pragma once

#include <cstddef>
#include <functional>

namespace mumoe {

/// Worker count: MUMOE_THREADS if set and positive, otherwise hardware concurrency.
std::size_t thread_count();

/// Runs fn(begin, end) over contiguous chunks of [0, n). Chunks never share an
/// index, so callers writing disjoint outputs get identical results for any
/// thread count. Work below min_chunk items stays on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t min_chunk = 1);

}  // namespace mumoe
