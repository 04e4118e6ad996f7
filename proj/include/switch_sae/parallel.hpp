#pragma once

#include <cstddef>
#include <functional>

namespace ssae {

/// Worker cap. Initialized from SAE_THREADS (default: hardware concurrency).
std::size_t max_threads();
void set_max_threads(std::size_t n);

/// Runs fn(i) for i in [0, n). Tasks are distributed over at most
/// max_threads() workers; each index runs exactly once. Callers must make
/// tasks write disjoint outputs so results do not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ssae
