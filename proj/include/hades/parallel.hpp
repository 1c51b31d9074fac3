#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace hades {

/// Number of worker threads to use when the caller asks for "auto" (0).
inline std::size_t resolve_threads(std::size_t requested)
{
    if (requested != 0)
        return requested;
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Run body(i) for i in [0, n). Work is handed out dynamically, so `body` must
/// not depend on execution order; results stay deterministic as long as each
/// index writes only its own output slot. The first exception thrown is
/// rethrown on the calling thread.
template <typename Body>
void parallel_for(std::size_t n, std::size_t threads, Body&& body)
{
    threads = std::min(resolve_threads(threads), n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            body(i);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;

    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n)
                return;
            try {
                body(i);
            }
            catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error)
                    error = std::current_exception();
                next.store(n);
                return;
            }
        }
    };

    std::vector<std::jthread> pool;
    pool.reserve(threads - 1);
    for (std::size_t t = 1; t < threads; ++t)
        pool.emplace_back(worker);
    worker();
    pool.clear();

    if (error)
        std::rethrow_exception(error);
}

} // namespace hades
