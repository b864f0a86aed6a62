#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace swapvae {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent named streams derived from one master seed.
enum class Stream : std::uint64_t {
  kDataset = 1,
  kBatches = 2,
  kReparam = 3,
  kInit = 4,
  kEval = 5,
  kService = 6,
};

inline Rng make_stream(std::uint64_t master_seed, Stream stream) {
  std::uint64_t s = splitmix64(master_seed ^ splitmix64(static_cast<std::uint64_t>(stream)));
  return Rng(s);
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
}

// Box-Muller on top of the engine; std::normal_distribution caches a spare
// value internally, which would make the stream state incomplete.
inline double standard_normal(Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = 0.0;
  do {
    u1 = std::generate_canonical<double, 53>(rng);
  } while (u1 <= 0.0);
  double u2 = std::generate_canonical<double, 53>(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * std::generate_canonical<double, 53>(rng);
}

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace swapvae
