// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace cpmtp {

/// Runs fn(i) for i in [0, count) on up to `workers` threads. Tasks are
/// claimed dynamically; callers must make results independent of which
/// thread runs a task. The first exception thrown is rethrown here.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn)
{
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto body = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) {
                    error = std::current_exception();
                }
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 1; w < workers; ++w) {
            pool.emplace_back(body);
        }
        body();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

/// Worker count from an explicit flag, else CP_SPEC_THREADS, else 1.
inline std::size_t resolve_threads(int flag)
{
    if (flag > 0) {
        return static_cast<std::size_t>(flag);
    }
    if (const char* env = std::getenv("CP_SPEC_THREADS")) {
        try {
            const int v = std::stoi(env);
            if (v > 0) {
                return static_cast<std::size_t>(v);
            }
        } catch (const std::exception&) {
        }
    }
    return 1;
}

} // namespace cpmtp
