#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace meshflow {

/// Worker cap: MESHFLOW_THREADS if set, else 1 (serial keeps runs reproducible).
inline int worker_count() {
    if (const char* env = std::getenv("MESHFLOW_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

/// Chunked parallel loop over [0, n). Body writes only to per-index slots, so
/// results are identical for any worker count.
template <typename F>
void parallel_for(int n, F&& body, int workers = worker_count()) {
    if (workers <= 1 || n < 2 * workers) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    const int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const int lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (int i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace meshflow
