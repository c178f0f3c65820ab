#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

namespace batchrl {

using Json = nlohmann::json;

// Ordered so that serialization and iteration are deterministic.
using FeatureMap = std::map<std::string, double>;

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad command-line usage. CLI exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data. CLI exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or produced non-finite values. CLI exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline void log_warning(std::string_view msg) { std::cerr << "warning: " << msg << '\n'; }

/// Progress messages go to stderr unless silenced.
inline bool& info_logging_enabled() {
  static bool enabled = true;
  return enabled;
}

inline void log_info(std::string_view msg) {
  if (info_logging_enabled()) std::cerr << msg << '\n';
}

/// 64-bit FNV-1a. Used for digests that must be stable across platforms.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

/// Derives an independent stream seed from a base seed and a tag sequence.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Uniform double in [0, 1) built from raw engine bits so results do not
/// depend on the standard library's distribution implementation.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Standard normal via Box-Muller; consumes exactly two engine draws.
inline double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

/// Fisher-Yates shuffle driven by uniform_index (portable across stdlibs).
template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Pairwise (tree) summation; the result depends only on element order.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  std::size_t mid = xs.size() / 2;
  return pairwise_sum(xs.first(mid)) + pairwise_sum(xs.subspan(mid));
}

/// Worker-thread cap from BATCHRL_THREADS. 0 (or unset) means deterministic
/// single-threaded execution.
inline int worker_threads() {
  const char* env = std::getenv("BATCHRL_THREADS");
  if (env == nullptr) return 0;
  int n = std::atoi(env);
  return n < 0 ? 0 : n;
}

/// Runs fn(i) for i in [0, n). Each index must write only to its own output
/// slot; the caller reduces in index order, so results are thread-count
/// independent.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  int threads = worker_threads();
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline Json feature_map_to_json(const FeatureMap& m) {
  Json j = Json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

inline FeatureMap feature_map_from_json(const Json& j, std::string_view what) {
  if (!j.is_object()) throw DataError(std::string(what) + " must be an object");
  FeatureMap m;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_number()) throw DataError(std::string(what) + "." + k + " must be a number");
    m[k] = v.get<double>();
  }
  return m;
}

}  // namespace batchrl
