#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pnc {

// ---------------------------------------------------------------------------
// Error taxonomy. Validation-class errors map to CLI exit code 1, the rest
// to exit code 2.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// User-facing input problems: bad values, bad shapes, bad config.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ArityError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IndexError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InsufficientDataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ExtrapolationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class MissingVariableError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class MissingTimestepError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class MaskError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Malformed on-disk data (bad magic, bad version, bad field).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Payload shorter/longer than the header promises.
class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (NaN loss); message carries step and last finite report.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 has a standard-specified output stream;
// the distributions below are hand-rolled so results do not depend on the
// standard library implementation.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return state_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(state_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    // rejection sampling keeps the distribution exact
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = state_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  /// Standard normal via Box-Muller (second value cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<size_t>(uniform_int(static_cast<int64_t>(i)))]);
    }
  }

 private:
  std::mt19937_64 state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Mix a base seed with a salt into a new seed (stable, documented recipe).
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed ^ (salt + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// ---------------------------------------------------------------------------
// Worker parallelism. PIDNOWCAST_THREADS caps the pool (default: all cores).
// Chunking is static so results never depend on scheduling.
// ---------------------------------------------------------------------------

inline int max_threads() {
  if (const char* env = std::getenv("PIDNOWCAST_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Run fn(i) for i in [0, n). Writes from distinct i must not alias.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int threads = std::min<int64_t>(max_threads(), n);
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  const int64_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int64_t lo = t * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Binary and text helpers.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "little-endian host assumed for PNWG and checkpoint I/O");

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_le(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}

template <typename T>
bool read_le(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<size_t>(is.gcount()) == sizeof(T);
}

/// Stable float formatting for CSV output (9 significant digits).
inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Write a CSV file with a fixed header; rows preformatted.
inline void write_csv(const std::filesystem::path& path, const std::string& header,
                      const std::vector<std::string>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << header << "\n";
  for (const auto& r : rows) os << r << "\n";
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace pnc
