#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace amri {

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based generator: draw i of (seed, stream) is a pure function of the
// triple, so results never depend on platform, thread order or std:: distributions.
struct RngState {
  static constexpr std::uint32_t kAlgorithm = 1;  // splitmix64 counter hash

  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t counter = 0;

  RngState() = default;
  RngState(std::uint64_t s, std::uint64_t st = 0) : seed(s), stream(st) {}

  // Independent child generator; the parent is not advanced.
  RngState split(std::uint64_t child) const {
    return RngState(detail::mix64(seed ^ 0x9E3779B97F4A7C15ULL) ^ detail::mix64(stream + 0x632BE59BD9B4E019ULL),
                    detail::mix64(child * 0xD1B54A32D192ED03ULL + counter));
  }

  std::uint64_t next_u64() {
    std::uint64_t key = detail::mix64(seed + 0x9E3779B97F4A7C15ULL * (stream + 1));
    return detail::mix64(key ^ detail::mix64(counter++ * 0x9E3779B97F4A7C15ULL + 0xD6E8FEB86659FD93ULL));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  friend bool operator==(const RngState&, const RngState&) = default;
};

// Fisher-Yates with the counter-based generator.
template <class It>
void shuffle(It first, It last, RngState& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace amri
