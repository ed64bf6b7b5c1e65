// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace mhome {

namespace detail {
inline std::atomic<int>& thread_setting()
{
    static std::atomic<int> n{1};
    return n;
}
} // namespace detail

inline void set_num_threads(int n) { detail::thread_setting() = std::max(1, n); }
inline int num_threads() { return detail::thread_setting().load(); }

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker, so
/// any reduction done inside fn(i) keeps its sequential order.
/// `work_per_item` is a rough flop estimate used to skip threading for small ops.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t work_per_item = 1)
{
    const auto threads = static_cast<std::size_t>(num_threads());
    constexpr std::size_t kMinWork = 1u << 15;
    if (threads <= 1 || n < 2 || n * work_per_item < kMinWork) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    const std::size_t workers = std::min(threads, n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi)
            break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i)
                fn(i);
        });
    }
    for (std::size_t i = 0; i < std::min(n, chunk); ++i)
        fn(i);
}

} // namespace mhome
