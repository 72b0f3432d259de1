#pragma once

#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace csen {

inline constexpr const char* kVersion = "0.1.0";

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatches between tensors or configs.
struct shape_error : error {
    using error::error;
};

// Invalid or inconsistent configuration values.
struct config_error : error {
    using error::error;
};

// File format and I/O failures.
struct io_error : error {
    using error::error;
};

// Dataset and manifest content problems.
struct data_error : error {
    using error::error;
};

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

inline std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Worker-thread cap. CSEN_THREADS wins; otherwise hardware concurrency.
inline int max_threads() {
    if (const char* env = std::getenv("CSEN_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

// Chunked index-range parallelism. Each index is owned by exactly one chunk,
// so results are independent of the thread count and schedule.
template <typename F>
void parallel_for(std::int64_t n, F&& body) {
    const int threads = max_threads();
    if (threads <= 1 || n < 2) {
        for (std::int64_t i = 0; i < n; ++i) body(i);
        return;
    }
    const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::int64_t lo = w * chunk;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (std::int64_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace csen
