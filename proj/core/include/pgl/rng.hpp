#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace pgl {

/// Deterministic random source backed by mt19937_64.
///
/// All draws are synthesized from the raw engine output rather than the
/// standard distribution classes, whose streams are implementation-defined.
/// Identical seeds therefore produce identical draws on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::int64_t uniform_int(std::int64_t n);

  /// Standard normal via Box-Muller; consumes exactly two draws per call.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Derives an independent child seed for stream index `stream`.
  static std::uint64_t split(std::uint64_t seed, std::uint64_t stream);

  std::string serialize() const;
  void deserialize(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace pgl
