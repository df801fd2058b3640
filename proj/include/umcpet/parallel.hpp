#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace umcpet {

// Global execution options, set once by the CLI (or by tests).
struct RunOptions {
  int threads = 1;
  bool strict_determinism = false;  // force sequential chunk execution
};

inline RunOptions& run_options() {
  static RunOptions opts;
  return opts;
}

// Deterministic chunked parallel loop. Work over [0, n) is split into chunks
// whose boundaries depend only on n, never on the thread count; chunk results
// must be merged by the caller in chunk order. This makes every reduction in
// the library bit-identical regardless of --threads.
inline std::size_t chunk_count(std::size_t n, std::size_t min_per_chunk = 1024) {
  if (n == 0) return 0;
  std::size_t c = (n + min_per_chunk - 1) / min_per_chunk;
  if (c > 256) c = 256;
  if (c < 1) c = 1;
  return c;
}

// fn(chunk_index, begin, end) is invoked once per chunk. Chunks are claimed
// dynamically but carry their index, so ordered merges stay deterministic.
template <typename Fn>
void for_chunks(std::size_t n, std::size_t n_chunks, Fn&& fn) {
  if (n == 0 || n_chunks == 0) return;
  const std::size_t base = n / n_chunks;
  const std::size_t rem = n % n_chunks;
  auto chunk_range = [&](std::size_t c) {
    const std::size_t b = c * base + std::min(c, rem);
    const std::size_t e = b + base + (c < rem ? 1 : 0);
    return std::pair<std::size_t, std::size_t>(b, e);
  };

  const auto& opts = run_options();
  int n_threads = opts.strict_determinism ? 1 : opts.threads;
  if (n_threads < 1) n_threads = 1;
  if (static_cast<std::size_t>(n_threads) > n_chunks) n_threads = static_cast<int>(n_chunks);

  if (n_threads == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) {
      auto [b, e] = chunk_range(c);
      fn(c, b, e);
    }
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= n_chunks) return;
      try {
        auto [b, e] = chunk_range(c);
        fn(c, b, e);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(n_threads) - 1);
  for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

template <typename Fn>
void for_chunks(std::size_t n, Fn&& fn) {
  for_chunks(n, chunk_count(n), std::forward<Fn>(fn));
}

}  // namespace umcpet
