#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace msad {

// ---------------------------------------------------------------------------
// Error taxonomy. Contract violations (shapes, values, configuration) and
// I/O or parse failures are distinct classes so the CLI can map them to
// distinct exit codes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor/layer shape contract violation.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Spatial arithmetic underflow (e.g. input smaller than kernel).
class DimensionError : public Error {
public:
  using Error::Error;
};

class ValueError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

/// Training loop hit a non-finite loss or gradient.
class TrainingDiverged : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class ParseError : public Error {
public:
  using Error::Error;
};

namespace detail {
inline void str_append(std::ostringstream&) {}
template <typename A, typename... R>
void str_append(std::ostringstream& os, const A& a, const R&... rest) {
  os << a;
  str_append(os, rest...);
}
}  // namespace detail

template <typename... A>
std::string str(const A&... args) {
  std::ostringstream os;
  detail::str_append(os, args...);
  return os.str();
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 has a standard-specified output sequence and
// the distributions below are hand-rolled, so every stream is reproducible
// across standard library implementations.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derive an independent stream seed from a base seed and a stream id.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw ValueError("Rng::uniform_index: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return static_cast<std::size_t>(x % un);
  }

  std::size_t uniform_index(std::size_t lo, std::size_t hi_incl) {
    return lo + uniform_index(hi_incl - lo + 1);
  }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[uniform_index(i)]);
  }

private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Worker threads. Kernels only parallelize across disjoint output slices and
// every element keeps a fixed accumulation order, so results are identical
// for any thread count.
// ---------------------------------------------------------------------------

inline std::atomic<int>& thread_count_ref() {
  static std::atomic<int> count{1};
  return count;
}

inline void set_num_threads(int n) { thread_count_ref() = std::max(1, n); }
inline int num_threads() { return thread_count_ref().load(); }

/// Run body(begin, end) over [0, n) split into contiguous chunks.
inline void parallel_for(std::size_t n,
                         const std::function<void(std::size_t, std::size_t)>& body) {
  const int want = num_threads();
  if (want <= 1 || n < 2) {
    body(0, n);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(want), n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, b, e] { body(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace msad
