// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace bspde {

/// Process-wide execution settings. Reproducible mode fixes chunk boundaries
/// independently of the thread count, so every reduction sums the same
/// partial results in the same order.
struct ExecutionPolicy {
    int threads = 1;
    bool reproducible = true;
    std::size_t chunk = 512;
};

ExecutionPolicy& execution_policy();

/// Thread count from BSPDE_THREADS, or 1 when unset or malformed.
int default_thread_count();

/// Splits [0, n) into chunks and calls fn(begin, end) for each one.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

/// Ordered reduction: fn(begin, end) returns a partial value per chunk and the
/// partials are summed in chunk order.
double parallel_sum(std::size_t n, const std::function<double(std::size_t, std::size_t)>& fn);

/// Chunk boundaries used by parallel_for for the current policy.
std::vector<std::size_t> chunk_bounds(std::size_t n);

}  // namespace bspde
