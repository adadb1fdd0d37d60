// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/system.hpp"
#include "egnpar/core/rng.hpp"

#include <array>
#include <cmath>

namespace egnpar {

struct GenOptions {
  std::size_t atoms = 16;
  /// Atoms per unit volume of the bounding cube.
  double density = 0.5;
  std::uint64_t seed = 0;
  /// Pair distances are at least min_distance; each new atom is placed
  /// between min_distance and link_distance from a random earlier atom, so
  /// any cutoff >= link_distance gives a connected graph.
  double min_distance = 0.8;
  double link_distance = 1.15;
  std::size_t max_attempts = 2000;
};

/// Species drawn for generated systems: H, C, N, O.
inline constexpr std::array<int, 4> kGenSpecies = {1, 6, 7, 8};

/// Random connected atom cloud inside a cube of volume atoms / density.
/// Deterministic per seed.
inline AtomicSystem generate_system(const GenOptions &o) {
  if (o.atoms == 0)
    throw Error("generate: need at least one atom");
  if (!(o.density > 0.0))
    throw Error("generate: density must be positive");
  if (!(o.min_distance > 0.0) || !(o.link_distance > o.min_distance))
    throw Error("generate: need 0 < min_distance < link_distance");
  const double side = std::cbrt(static_cast<double>(o.atoms) / o.density);
  SplitMix64 rng(o.seed);

  AtomicSystem s;
  s.id = "gen n=" + std::to_string(o.atoms) + " seed=" + std::to_string(o.seed);
  s.positions.push_back({side / 2, side / 2, side / 2});
  s.atomic_numbers.push_back(kGenSpecies[rng.below(kGenSpecies.size())]);
  while (s.size() < o.atoms) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < o.max_attempts && !placed; ++attempt) {
      const Vec3 &anchor = s.positions[rng.below(s.size())];
      Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
      const double n = norm(dir);
      if (n < 1e-12)
        continue;
      const double r = rng.uniform(o.min_distance, o.link_distance);
      const Vec3 x = anchor + (r / n) * dir;
      bool ok = true;
      for (int c = 0; c < 3 && ok; ++c)
        ok = x[c] >= 0.0 && x[c] <= side;
      for (std::size_t i = 0; i < s.size() && ok; ++i)
        ok = norm(x - s.positions[i]) >= o.min_distance;
      if (ok) {
        s.positions.push_back(x);
        placed = true;
      }
    }
    if (!placed)
      throw Error("generate: could not place atom " + std::to_string(s.size() + 1) +
                  " of " + std::to_string(o.atoms) + " after " +
                  std::to_string(o.max_attempts) + " attempts; density " +
                  std::to_string(o.density) + " is too high");
    s.atomic_numbers.push_back(kGenSpecies[rng.below(kGenSpecies.size())]);
  }
  return s;
}

inline AtomicSystem generate_system(std::size_t atoms, double density, std::uint64_t seed) {
  GenOptions o;
  o.atoms = atoms;
  o.density = density;
  o.seed = seed;
  return generate_system(o);
}

} // namespace egnpar
