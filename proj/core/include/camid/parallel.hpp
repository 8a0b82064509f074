#pragma once

#include <cstddef>
#include <functional>

namespace camid {

/// Number of hardware threads, at least 1.
std::size_t default_workers();

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
///
/// Jobs are claimed from a shared atomic counter; callers that need
/// deterministic output must write results into index-addressed slots and
/// reduce in index order afterwards. Exceptions from jobs are captured and
/// the first one is rethrown after all threads join.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace camid
