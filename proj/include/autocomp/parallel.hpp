#pragma once

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace autocomp {

// Worker cap: AUTOCOMP_THREADS when set, otherwise the hardware count.
inline unsigned thread_cap() {
    if (const char* env = std::getenv("AUTOCOMP_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

// Runs f(i) for i in [0, n). Callers keep determinism by writing results
// into index i of a pre-sized buffer and reducing sequentially afterwards.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
    unsigned workers = thread_cap();
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    if (workers > n) workers = static_cast<unsigned>(n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                f(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace autocomp
