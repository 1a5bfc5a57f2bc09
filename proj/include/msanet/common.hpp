// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

// Finiteness guards run in debug/test builds; release builds skip them.
#ifndef MSANET_CHECK_FINITE
#ifdef NDEBUG
#define MSANET_CHECK_FINITE 0
#else
#define MSANET_CHECK_FINITE 1
#endif
#endif

namespace msanet {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes, so keep the split
// between usage/config problems, I/O problems and broken internal contracts.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what) : Error("argument error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("i/o error: " + what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract error: " + what) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. The engine is std::mt19937_64 (standardised sequence);
// the mappings to uniform/normal floats are written out explicitly so the
// stream does not depend on the standard library's distribution internals.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
    // splitmix64 warm-up so nearby seeds decorrelate
    next_u64();
    next_u64();
  }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(next_unit()) * (hi - lo);
  }

  // Box-Muller; consumes two uniforms per pair, caches the second draw.
  float normal(float mean, float stddev) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = next_unit();
    double u2 = next_unit();
    while (u1 <= 1e-300) u1 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    has_spare_ = true;
    return mean + stddev * static_cast<float>(r * std::cos(a));
  }

  // integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

 private:
  std::uint64_t state_;
  float spare_ = 0.0f;
  bool has_spare_ = false;
};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derives an independent stream from a base seed and a stream index, e.g.
// (global seed, step) for batches or (global seed, name hash) for parameters.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed ^ (stream + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Intra-op parallelism. Kernels only use parallel_for where writes are
// disjoint and each element's reduction order is fixed, so results are
// bitwise identical for any thread count.
// ---------------------------------------------------------------------------

inline int& thread_count_ref() {
  static int count = [] {
    if (const char* env = std::getenv("MSANET_THREADS")) {
      const int n = std::atoi(env);
      if (n >= 1) return n;
    }
    return 1;
  }();
  return count;
}

inline int thread_count() { return thread_count_ref(); }
inline void set_thread_count(int n) { thread_count_ref() = n < 1 ? 1 : n; }

// Splits [0, n) into contiguous chunks, one per worker. body(begin, end).
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
  const int threads = thread_count();
  if (threads <= 1 || n < 2) {
    if (n > 0) body(0, n);
    return;
  }
  const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (int t = 1; t < workers; ++t) {
    const std::int64_t b = t * chunk;
    const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, b, e] { body(b, e); });
  }
  body(0, std::min<std::int64_t>(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace msanet
