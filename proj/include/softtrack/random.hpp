// random.hpp: portable seeded random streams.
//
// std::mt19937_64 output is fixed by the standard, but the std distributions
// are not, so the uniform/normal transforms live here to keep generated data
// byte-identical across standard libraries.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace softtrack {

/// splitmix64 finalizer; derives independent child seeds from a master seed.
inline std::uint64_t splitmix64(std::uint64_t x)
{
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed of the index-th child stream of master.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index)
{
  return splitmix64(master ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

class Rng
{
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi)
  {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = span == 0 ? 0 : (~std::uint64_t{0} / span) * span;
    std::uint64_t x = engine_();
    while (limit != 0 && x >= limit) {
      x = engine_();
    }
    return lo + static_cast<std::int64_t>(span == 0 ? x : x % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Box-Muller; caches the second variate.
  double normal(double mean = 0.0, double stddev = 1.0)
  {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  std::mt19937_64& engine() { return engine_; }

private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace softtrack
