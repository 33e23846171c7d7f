#pragma once

#include <cstdint>
#include <random>

#include "ccswarm/vec.hpp"

namespace ccswarm {

// All randomness flows from one root seed. Streams are derived by a
// splitmix64 counter scheme: stream(root, id) hashes (root, id) into a
// 64-bit seed, so particle i / purpose p always sees the same engine
// regardless of worker count or call order.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream_id) {
  return splitmix64(splitmix64(root) ^ splitmix64(stream_id + 0x123456789abcdefULL));
}

inline std::mt19937_64 make_engine(std::uint64_t root, std::uint64_t stream_id) {
  return std::mt19937_64(derive_seed(root, stream_id));
}

inline double draw_normal(std::mt19937_64& eng) {
  std::normal_distribution<double> g(0.0, 1.0);
  return g(eng);
}

inline void fill_normal(std::mt19937_64& eng, Vec& out) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = g(eng);
}

inline double draw_uniform(std::mt19937_64& eng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(eng);
}

}  // namespace ccswarm
