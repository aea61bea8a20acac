// Deterministic random number generation.
//
// Distribution sampling is hand-rolled on top of std::mt19937_64 so that
// streams are identical across standard library implementations; frozen test
// values and byte-identical artifacts depend on this.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace reframe {

// SplitMix64, used to decorrelate seeds derived from (seed, stream) pairs.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream * 0xd6e8feb86659fd93ull + 1));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(splitmix64(seed)) {}
  Rng(std::uint64_t seed, std::uint64_t stream) : gen_(mix_seed(seed, stream)) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection-sampled, unbiased.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Fixed stream ids so unrelated consumers of one seed never share a sequence.
namespace streams {
constexpr std::uint64_t kEnvInit = 1;
constexpr std::uint64_t kPolicyNoise = 2;
constexpr std::uint64_t kParamInit = 3;
constexpr std::uint64_t kDropout = 4;
constexpr std::uint64_t kSampler = 5;
constexpr std::uint64_t kEvalRollout = 6;
constexpr std::uint64_t kReframeInit = 7;
}  // namespace streams

}  // namespace reframe
