#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gka {

inline int max_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("GKA_THREADS")) {
        int cap = std::atoi(env);
        if (cap > 0 && cap < hw) hw = cap;
    }
    return hw;
}

// Static block partition of [0, n). Each index is processed exactly once by
// one worker; results must not depend on the partition.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    int nthreads = max_threads();
    if (nthreads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    if (nthreads > n) nthreads = n;
    std::vector<std::thread> workers;
    workers.reserve(nthreads);
    for (int w = 0; w < nthreads; ++w) {
        int lo = static_cast<int>(static_cast<long long>(n) * w / nthreads);
        int hi = static_cast<int>(static_cast<long long>(n) * (w + 1) / nthreads);
        workers.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : workers) t.join();
}

}  // namespace gka
