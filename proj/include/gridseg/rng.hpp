#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace gridseg {

/** @brief Seeded generator with explicit draw mappings.
 *
 * All distribution mappings are written out by hand so that streams are
 * identical across standard libraries and platforms.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /** @brief Uniform double in [0, 1) with 53 random bits. */
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /** @brief Log-uniform: exp of a uniform draw between the logs of the bounds. */
  double log_uniform(double lo, double hi) {
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /** @brief Uniform integer in [lo, hi] via rejection-free modulo on 64 bits. */
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace gridseg
