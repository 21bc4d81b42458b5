#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace mzsim {

namespace detail {
inline std::atomic<unsigned> &thread_setting() {
    static std::atomic<unsigned> n{1};
    return n;
}
} // namespace detail

/// Worker count used by the row-parallel kernels. Results do not depend on it:
/// each output row is produced by exactly one worker with a fixed summation order.
inline void set_num_threads(unsigned n) { detail::thread_setting() = std::max(1u, n); }
inline unsigned num_threads() { return detail::thread_setting(); }

/// Calls fn(begin, end) over disjoint chunks of [0, n).
template <class Fn> void parallel_for(std::size_t n, Fn &&fn, std::size_t min_chunk = 4096) {
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(num_threads(), (n + min_chunk - 1) / min_chunk));
    if (workers <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 1; w < workers; ++w) {
        const std::size_t b = std::min(n, w * chunk), e = std::min(n, b + chunk);
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(std::size_t{0}, std::min(n, chunk));
    for (auto &t : pool) t.join();
}

} // namespace mzsim
