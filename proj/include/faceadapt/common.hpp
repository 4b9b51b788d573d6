// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace faceadapt {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

/// Validation failures that should surface as exit code 2 at the CLI.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable or malformed data files (images, manifests, containers).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Warnings. Non-fatal diagnostics go through a replaceable handler so tests
// can capture them.
// ---------------------------------------------------------------------------

using WarnHandler = std::function<void(const std::string&)>;

inline WarnHandler& warn_handler() {
  static WarnHandler handler = [](const std::string& msg) {
    std::fputs(("[faceadapt] warning: " + msg + "\n").c_str(), stderr);
  };
  return handler;
}

inline void set_warn_handler(WarnHandler h) { warn_handler() = std::move(h); }

inline void warn(const std::string& msg) {
  if (warn_handler()) warn_handler()(msg);
}

// ---------------------------------------------------------------------------
// Hashing and seed derivation. A single global seed fans out to per-purpose
// seeds via derive_seed(global, label); per-epoch / per-sample streams come
// from mix_seed. Both are stable across platforms.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 14695981039346656037ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Keeps string literals out of the (pointer, byte count) overload above.
inline std::uint64_t fnv1a64(const char* s,
                             std::uint64_t h = 14695981039346656037ull) {
  return fnv1a64(std::string_view(s), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view domain) {
  return splitmix64(global_seed ^ fnv1a64(domain));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x9e3779b97f4a7c15ull));
}

// ---------------------------------------------------------------------------
// Rng: mt19937_64 with self-contained distributions so that streams are
// bit-reproducible regardless of the standard library.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform double in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one draw per call, no cached pair).
  double gaussian() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// Fill row-by-row so the layout of the draw order is part of the contract.
template <typename Scalar>
void fill_gaussian(MatX<Scalar>& m, Rng& rng, double stddev, double mean = 0.0) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = Scalar(rng.gaussian(mean, stddev));
}

template <typename Scalar>
void fill_gaussian(VecX<Scalar>& v, Rng& rng, double stddev, double mean = 0.0) {
  for (Index i = 0; i < v.size(); ++i) v(i) = Scalar(rng.gaussian(mean, stddev));
}

}  // namespace faceadapt
