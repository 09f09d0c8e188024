// Deterministic random streams.
//
// All randomness in the project flows from one root seed through named
// streams, so enabling or disabling one consumer never perturbs the draws
// of another. Distribution transforms are implemented here (not via
// std::uniform_real_distribution etc.) because the standard distributions
// are implementation-defined and would break run-to-run reproducibility
// guarantees across toolchains.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "latitude/common.hpp"

namespace latitude {

// 64-bit FNV-1a over the seed bytes followed by the stream name.
inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(root >> (8 * i)));
  for (char c : name) mix(static_cast<unsigned char>(c));
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view name) : engine_(stream_seed(root, name)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection-free multiply-shift; bias is negligible for n << 2^64 and
    // the result is deterministic, which is what matters here.
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller (deterministic across platforms).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  Vec3 uniform_unit_vector() {
    // Marsaglia rejection on the sphere.
    while (true) {
      const double a = uniform(-1.0, 1.0);
      const double b = uniform(-1.0, 1.0);
      const double s = a * a + b * b;
      if (s >= 1.0 || s == 0.0) continue;
      const double t = 2.0 * std::sqrt(1.0 - s);
      return Vec3(a * t, b * t, 1.0 - 2.0 * s);
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace latitude
