#pragma once

#include <cstddef>
#include <functional>

namespace reid {

/// Worker pool size: REID_UDA_THREADS when set to a positive integer,
/// otherwise the hardware concurrency (at least 1).
std::size_t worker_count();

/// Calls body(i) for i in [0, n) across worker_count() threads. Each index is
/// visited exactly once; callers write results by index, so the outcome does
/// not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace reid
