#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace hssda {

// SplitMix64 step; used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact everywhere by
// the standard); the draw helpers below replace std::*_distribution, whose
// output is implementation-defined, so every artifact is reproducible from
// (config, seed) across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; two uniform draws per call, no cached state.
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_int(i)]);
    }
  }

  // Independent stream for a tagged sub-task (scene id, epoch, ...). Same
  // (seed, tag) always yields the same stream regardless of draw order in
  // the parent.
  Rng fork(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ (0x517cc1b727220a95ULL * (tag + 1)))); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace hssda
