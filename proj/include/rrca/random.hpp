#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace rrca {

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
std::uint64_t fnv1a(std::string_view s);

/// SplitMix64 finalizer.
std::uint64_t splitmix64(std::uint64_t x);

/// Derives an independent stream seed from a global seed and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// mt19937_64 with portable draws. The std distributions are
/// implementation-defined, so all sampling goes through these helpers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Uniform integer in [lo, hi].
  int range(int lo, int hi);
  bool coin(double p = 0.5) { return uniform() < p; }
  /// Standard normal via Box-Muller (no cached second deviate).
  double normal();

  std::string save() const;
  void load(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace rrca
