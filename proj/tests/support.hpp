// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the test programs.
#pragma once

#include "egnpar/atomgraph/graph.hpp"
#include "egnpar/atomgraph/system.hpp"
#include "egnpar/core/rng.hpp"
#include "egnpar/model/config.hpp"
#include "egnpar/model/params.hpp"

#include <array>
#include <memory>
#include <numbers>
#include <cmath>
#include <vector>

namespace testing_support {

using namespace egnpar;

/// Uniform cloud in a cube, rejecting pairs closer than min_dist. Graphs may
/// be disconnected; that is intended for topology tests.
inline AtomicSystem random_cloud(std::size_t n, double side, std::uint64_t seed,
                                 double min_dist = 0.5) {
  SplitMix64 rng(seed);
  AtomicSystem s;
  while (s.size() < n) {
    const Vec3 x{rng.uniform(0, side), rng.uniform(0, side), rng.uniform(0, side)};
    bool ok = true;
    for (const auto &y : s.positions)
      ok = ok && norm(x - y) >= min_dist;
    if (!ok)
      continue;
    s.positions.push_back(x);
    s.atomic_numbers.push_back(static_cast<int>(1 + rng.below(8)));
  }
  return s;
}

inline std::vector<std::array<double, 3>> as_p3(const AtomicSystem &s) {
  return {s.positions.begin(), s.positions.end()};
}

inline std::shared_ptr<const GraphTopology> topology_of(const AtomicSystem &s,
                                                        double cutoff) {
  return std::make_shared<const GraphTopology>(build_graph(s, cutoff).topology);
}

/// n atoms evenly spaced on a circle of radius r in the xy plane.
inline AtomicSystem ring(std::size_t n, double r = 1.0, int z = 6) {
  AtomicSystem s;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    s.positions.push_back({r * std::cos(a), r * std::sin(a), 0.0});
    s.atomic_numbers.push_back(z);
  }
  return s;
}

/// Small configuration for fast tests.
inline ModelConfig small_config(Variant v, std::uint64_t seed = 0) {
  ModelConfig c;
  c.variant = v;
  c.blocks = 2;
  c.d_u = 3;
  c.d_v = 6;
  c.d_e = 5;
  c.d_t = 4;
  c.d_bil = 3;
  c.k_rbf = 4;
  c.l_sbf = 3;
  c.cutoff = 1.5;
  c.seed = seed;
  return c;
}

/// Relative error of two scalars in the same convention as max_rel_error.
inline double rel(double a, double b, double floor = 1e-300) {
  if (a == b)
    return 0.0;
  return std::abs(a - b) / std::max(std::abs(b), floor);
}

/// Largest per-tensor relative error between two parameter sets.
inline double max_rel_error(const ModelParams &a, const ModelParams &b,
                            double floor = 1e-300) {
  std::vector<const Matrix *> x, y;
  a.for_each([&](const std::string &, const Matrix &m, std::size_t) { x.push_back(&m); });
  b.for_each([&](const std::string &, const Matrix &m, std::size_t) { y.push_back(&m); });
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, egnpar::max_rel_error(*x[i], *y[i], floor));
  return worst;
}

inline double max_abs_diff(const Matrix &a, const Matrix &b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline Mat3 random_rotation(SplitMix64 &rng) {
  return rotation_from_quaternion(rng.normal(), rng.normal(), rng.normal(), rng.normal());
}

inline Matrix rotate_rows(const Matrix &m, const Mat3 &r) {
  Matrix out(m.rows(), 3);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const Vec3 v = r * Vec3{m(i, 0), m(i, 1), m(i, 2)};
    for (int c = 0; c < 3; ++c)
      out(i, c) = v[c];
  }
  return out;
}

/// Same neighbor list under coordinate shifts of size h, and no bond angle
/// within ~1e-3 rad of 0 or pi.
inline bool fd_safe(const AtomicSystem &s, double cutoff, double h) {
  const auto g = build_graph(s, cutoff);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j)
      if (std::abs(norm(s.positions[i] - s.positions[j]) - cutoff) < 10 * h)
        return false;
  for (double a : g.geometry.angles)
    if (std::sin(a) < 1e-3)
      return false;
  return true;
}

} // namespace testing_support
