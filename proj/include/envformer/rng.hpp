#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "envformer/common.hpp"

namespace envformer {

/// Deterministic random source. All distribution transforms are implemented
/// here (not via std::uniform_real_distribution etc.) so that a given seed
/// yields the same stream on every standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. Pairs are generated together and the
  /// second value is cached, so draws stay deterministic per seed.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n). Rejection-sampled to avoid modulo bias.
  std::uint64_t integer(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::integer: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  /// Derive an independent child stream. Forking never perturbs the parent
  /// beyond consuming one draw, so sub-components can be reseeded without
  /// coupling their consumption patterns.
  Rng fork() {
    std::uint64_t s = engine_();
    // splitmix64 finalizer decorrelates the child from the raw parent output.
    s += 0x9e3779b97f4a7c15ull;
    s = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9ull;
    s = (s ^ (s >> 27)) * 0x94d049bb133111ebull;
    s = s ^ (s >> 31);
    return Rng(s);
  }

  /// Bernoulli draw with success probability p.
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace envformer
