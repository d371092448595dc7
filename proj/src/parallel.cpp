// SPDX-License-Identifier: Apache-2.0
#include "bspde/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>

namespace bspde {

ExecutionPolicy& execution_policy() {
    static ExecutionPolicy policy{default_thread_count(), true, 512};
    return policy;
}

int default_thread_count() {
    if (const char* env = std::getenv("BSPDE_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) return n;
        } catch (const std::exception&) {
        }
    }
    return 1;
}

std::vector<std::size_t> chunk_bounds(std::size_t n) {
    const ExecutionPolicy& policy = execution_policy();
    std::vector<std::size_t> bounds{0};
    if (n == 0) return bounds;
    std::size_t chunk = policy.reproducible
                            ? std::max<std::size_t>(1, policy.chunk)
                            : (n + policy.threads - 1) / std::max(1, policy.threads);
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t b = chunk; b < n; b += chunk) bounds.push_back(b);
    bounds.push_back(n);
    return bounds;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    const auto bounds = chunk_bounds(n);
    const std::size_t chunks = bounds.size() - 1;
    const int threads = std::max(1, execution_policy().threads);
    if (threads == 1 || chunks <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) fn(bounds[c], bounds[c + 1]);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t c = t; c < chunks; c += threads) fn(bounds[c], bounds[c + 1]);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

double parallel_sum(std::size_t n, const std::function<double(std::size_t, std::size_t)>& fn) {
    const auto bounds = chunk_bounds(n);
    std::vector<double> partial(bounds.size() - 1, 0.0);
    parallel_for(partial.size(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t c = begin; c < end; ++c) partial[c] = fn(bounds[c], bounds[c + 1]);
    });
    double total = 0.0;
    for (double v : partial) total += v;
    return total;
}

}  // namespace bspde
