#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace mia {

/// xoshiro256** seeded through splitmix64. All randomness in the workbench
/// flows through this generator so runs are reproducible bit-for-bit across
/// platforms; std::* distributions are implementation-defined and never used.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform();

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);

  /// Uniform integer in [0, n); n must be > 0. Unbiased via rejection.
  uint64_t below(uint64_t n);

  /// Box-Muller with a cached spare draw.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  /// Sample k distinct indices from [0, n) without replacement.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k);

 private:
  uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Deterministic child-seed derivation: mixes the global seed with the stage
/// name and a grid index so every pipeline stage is independently
/// reproducible. child = splitmix(seed ^ fnv1a64(stage) ^ golden * (index+1)).
uint64_t derive_seed(uint64_t base_seed, std::string_view stage, uint64_t index = 0);

}  // namespace mia
