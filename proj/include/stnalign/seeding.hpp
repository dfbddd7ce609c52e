#ifndef STNALIGN_SEEDING_HPP_
#define STNALIGN_SEEDING_HPP_

#include <cstdint>

namespace stnalign {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Seed for an independent stream keyed by (seed, a, b).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return detail::splitmix64(detail::splitmix64(detail::splitmix64(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

}  // namespace stnalign

#endif  // STNALIGN_SEEDING_HPP_
