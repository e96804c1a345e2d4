#pragma once

#include <cstdint>
#include <random>

namespace fedreid {

using Rng = std::mt19937_64;

// splitmix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named purposes for derived streams. Values are part of the reproducibility
// contract: changing them changes every seeded result.
enum class Stream : std::uint64_t {
  ServerInit = 1,
  Server = 2,
  Client = 3,
  Individual = 4,
  Centralised = 5,
  Split = 6,
  Data = 7,
};

constexpr std::uint64_t derive_seed(std::uint64_t master, Stream purpose, std::uint64_t index = 0) noexcept {
  return mix64(mix64(master ^ mix64(static_cast<std::uint64_t>(purpose))) + index);
}

inline Rng make_rng(std::uint64_t master, Stream purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(master, purpose, index));
}

// Standard normal draw. A fresh distribution per call keeps the stream free of
// cached state, so replaying the same engine reproduces the same values.
inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

inline double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

}  // namespace fedreid
