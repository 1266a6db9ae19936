#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gcm {

/// All stochastic code draws from an explicitly injected engine so that every
/// run is reproducible from its seed and parallel workers can own independent
/// streams.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a over a byte string; stable across platforms and runs. Used to
/// derive per-replication seeds from structured keys.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

// Distribution objects are constructed per call: they carry hidden state
// (e.g. a cached Box-Muller spare) that would otherwise make draw sequences
// depend on call history.
inline double draw_uniform(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double draw_normal(Rng& rng, double mean = 0.0, double sd = 1.0) {
  return std::normal_distribution<double>(mean, sd)(rng);
}

inline double draw_exponential(Rng& rng, double mean) {
  return std::exponential_distribution<double>(1.0 / mean)(rng);
}

inline double draw_gamma(Rng& rng, double shape, double scale) {
  return std::gamma_distribution<double>(shape, scale)(rng);
}

inline double draw_chi_squared(Rng& rng, double df) {
  return std::chi_squared_distribution<double>(df)(rng);
}

inline double draw_student_t(Rng& rng, double df) {
  return std::student_t_distribution<double>(df)(rng);
}

inline double draw_lognormal(Rng& rng, double log_mean = 0.0, double log_sd = 1.0) {
  return std::lognormal_distribution<double>(log_mean, log_sd)(rng);
}

inline bool draw_bernoulli(Rng& rng, double p) { return draw_uniform(rng) < p; }

}  // namespace gcm
