#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsafdet {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown by the trainer when the loss turns non-finite.
class TrainAbort : public std::runtime_error {
 public:
  TrainAbort(const std::string& msg, std::vector<int64_t> batch_ids)
      : std::runtime_error(msg), offending_batch_ids(std::move(batch_ids)) {}
  std::vector<int64_t> offending_batch_ids;
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

inline int make_divisible(double v, int divisor) {
  int d = static_cast<int>(std::lround(v / divisor)) * divisor;
  return d < divisor ? divisor : d;
}

/// Deterministic RNG. mt19937 output is standardized; the value
/// transforms below are spelled out so streams never depend on
/// libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  /// Uniform in [0,1).
  double uniform() {
    return (gen_() >> 5) * (1.0 / 134217728.0) / 64.0 +
           (gen_() >> 6) * (1.0 / 67108864.0) / 67108864.0 / 64.0;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Box-Muller, one value per call (the pair's second half is dropped
  /// to keep the stream position independent of call parity).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
  }

  /// Uniform integer in [0, n).
  int64_t randint(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Fisher-Yates.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[randint(i + 1)]);
    }
  }

  /// Derive an independent stream, e.g. per epoch or per sample.
  static uint64_t mix(uint64_t seed, uint64_t salt) {
    uint64_t h = seed ^ (salt + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
  }

 private:
  std::mt19937 gen_;
};

namespace fault {

/// Test-only fault injection used by the verify suite's mutation check.
inline std::string& injected() {
  static thread_local std::string name;
  return name;
}

inline void inject(const std::string& name) { injected() = name; }
inline void clear() { injected().clear(); }
inline bool active(const char* name) { return injected() == name; }

}  // namespace fault

}  // namespace dsafdet
