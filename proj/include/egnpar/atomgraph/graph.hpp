// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/system.hpp"

#include <cstddef>
#include <numbers>
#include <vector>

namespace egnpar {

/// Directed edge s -> r. The message on it flows from source to receiver.
struct Edge {
  std::size_t source;
  std::size_t receiver;
  bool operator==(const Edge &) const = default;
};

/// Ordered pair of adjacent edges (k->j, j->i) with k != i.
struct Triplet {
  std::size_t in_edge;  // k -> j
  std::size_t out_edge; // j -> i
  bool operator==(const Triplet &) const = default;
};

/// Nodes, directed edges sorted by (source, receiver), and triplets sorted by
/// (out_edge, in_edge).
struct GraphTopology {
  std::size_t num_nodes = 0;
  std::vector<Edge> edges;
  std::vector<Triplet> triplets;

  std::size_t num_edges() const noexcept { return edges.size(); }
  std::size_t num_triplets() const noexcept { return triplets.size(); }

  /// For each edge a->b, the index of b->a. Throws if one is missing.
  std::vector<std::size_t> reverse_edges() const {
    std::vector<std::size_t> rev(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const Edge want{edges[e].receiver, edges[e].source};
      // edges are sorted by (source, receiver): binary search
      std::size_t lo = 0, hi = edges.size();
      while (lo < hi) {
        const std::size_t mid = (lo + hi) / 2;
        const Edge &m = edges[mid];
        if (m.source < want.source ||
            (m.source == want.source && m.receiver < want.receiver))
          lo = mid + 1;
        else
          hi = mid;
      }
      if (lo == edges.size() || !(edges[lo] == want))
        throw Error("reverse edge missing for edge " + std::to_string(e) +
                    " (" + std::to_string(want.receiver) + "->" +
                    std::to_string(want.source) + ")");
      rev[e] = lo;
    }
    return rev;
  }

  /// Throws Error if an invariant of the type is violated.
  void validate() const {
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const auto &ed = edges[e];
      if (ed.source >= num_nodes || ed.receiver >= num_nodes)
        throw Error("edge " + std::to_string(e) + " references a missing node");
      if (ed.source == ed.receiver)
        throw Error("self edge at " + std::to_string(e));
      if (e > 0) {
        const auto &p = edges[e - 1];
        if (p.source > ed.source ||
            (p.source == ed.source && p.receiver >= ed.receiver))
          throw Error("edges not strictly sorted by (source, receiver)");
      }
    }
    (void)reverse_edges();
    for (std::size_t t = 0; t < triplets.size(); ++t) {
      const auto &tr = triplets[t];
      if (tr.in_edge >= edges.size() || tr.out_edge >= edges.size())
        throw Error("triplet " + std::to_string(t) + " references a missing edge");
      if (edges[tr.in_edge].receiver != edges[tr.out_edge].source)
        throw Error("triplet " + std::to_string(t) + " edges are not adjacent");
      if (edges[tr.in_edge].source == edges[tr.out_edge].receiver)
        throw Error("triplet " + std::to_string(t) + " has k == i");
    }
  }
};

/// Per-edge distances and unit vectors (source -> receiver) and per-triplet
/// bond angles at the shared atom.
struct Geometry {
  std::vector<double> distances;
  std::vector<Vec3> unit_vectors;
  std::vector<double> angles;
};

/// One triplet per pair of edges ((k->j), (j->i)) with k != i, ordered by
/// (out_edge, in_edge). Any existing triplets in `topology` are ignored.
inline std::vector<Triplet> enumerate_triplets(const GraphTopology &topology) {
  std::vector<std::vector<std::size_t>> incoming(topology.num_nodes);
  for (std::size_t e = 0; e < topology.edges.size(); ++e)
    incoming[topology.edges[e].receiver].push_back(e);

  std::vector<Triplet> out;
  for (std::size_t e2 = 0; e2 < topology.edges.size(); ++e2) {
    const auto [j, i] = topology.edges[e2];
    for (std::size_t e1 : incoming[j])
      if (topology.edges[e1].source != i)
        out.push_back({e1, e2});
  }
  return out;
}

/// Bond angle at j between (x_k - x_j) and (x_i - x_j), in [0, pi].
inline double bond_angle(const Vec3 &xk, const Vec3 &xj, const Vec3 &xi) {
  const Vec3 a = xk - xj;
  const Vec3 b = xi - xj;
  return std::atan2(norm(cross(a, b)), dot(a, b));
}

/// Geometry for a fixed topology. The topology is not re-derived from the
/// positions, so this is also the fixed-topology map used for differentiation.
inline Geometry compute_geometry(const std::vector<Vec3> &positions,
                                 const GraphTopology &topology) {
  Geometry g;
  g.distances.reserve(topology.num_edges());
  g.unit_vectors.reserve(topology.num_edges());
  for (const auto &e : topology.edges) {
    const Vec3 r = positions[e.receiver] - positions[e.source];
    const double d = norm(r);
    g.distances.push_back(d);
    g.unit_vectors.push_back((1.0 / d) * r);
  }
  g.angles.reserve(topology.num_triplets());
  for (const auto &t : topology.triplets) {
    const auto &in = topology.edges[t.in_edge];
    const auto &out = topology.edges[t.out_edge];
    g.angles.push_back(bond_angle(positions[in.source], positions[in.receiver],
                                  positions[out.receiver]));
  }
  return g;
}

struct BuiltGraph {
  GraphTopology topology;
  Geometry geometry;
};

/// Directed edges for every ordered pair with 0 < d <= cutoff, plus triplets
/// and geometry. O(n^2) pair scan; no neighbor-count cap.
inline BuiltGraph build_graph(const AtomicSystem &system, double cutoff) {
  if (!(cutoff > 0.0))
    throw Error("build_graph: cutoff must be positive");
  if (system.size() == 0)
    throw Error("build_graph: system has no atoms");
  BuiltGraph out;
  auto &topo = out.topology;
  topo.num_nodes = system.size();
  const auto &x = system.positions;
  for (std::size_t s = 0; s < x.size(); ++s)
    for (std::size_t r = 0; r < x.size(); ++r) {
      if (r == s)
        continue;
      const double d = norm(x[r] - x[s]);
      if (d > 0.0 && d <= cutoff)
        topo.edges.push_back({s, r});
    }
  topo.triplets = enumerate_triplets(topo);
  out.geometry = compute_geometry(x, topo);
  return out;
}

/// Gradients of one edge length with respect to its endpoints.
struct DistanceGradient {
  Vec3 d_source;
  Vec3 d_receiver;
};

/// Gradients of one bond angle with respect to the three atoms k, j, i.
struct AngleGradient {
  Vec3 d_k;
  Vec3 d_j;
  Vec3 d_i;
};

inline DistanceGradient distance_gradient(const std::vector<Vec3> &positions,
                                          const Edge &edge) {
  const Vec3 r = positions[edge.receiver] - positions[edge.source];
  const Vec3 u = (1.0 / norm(r)) * r;
  return {-u, u};
}

/// Relative sin(alpha) below which an angle is treated as exactly collinear.
inline constexpr double kCollinearSin = 1e-12;

/// Closed-form gradient of alpha = atan2(|a x b|, a.b) with a = x_k - x_j and
/// b = x_i - x_j. At alpha in {0, pi} the gradient is undefined; the zero
/// vector is returned there.
inline AngleGradient angle_gradient(const Vec3 &xk, const Vec3 &xj,
                                    const Vec3 &xi) {
  const Vec3 a = xk - xj;
  const Vec3 b = xi - xj;
  const double na = norm(a), nb = norm(b);
  const double cr = norm(cross(a, b));
  if (cr <= kCollinearSin * na * nb)
    return {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  const double ab = dot(a, b);
  // d alpha / d a = -(b - (a.b) a / |a|^2) / |a x b|
  const Vec3 ga = (-1.0 / cr) * (b - (ab / (na * na)) * a);
  const Vec3 gb = (-1.0 / cr) * (a - (ab / (nb * nb)) * b);
  return {ga, -(ga + gb), gb};
}

inline AngleGradient angle_gradient(const std::vector<Vec3> &positions,
                                    const GraphTopology &topology,
                                    const Triplet &t) {
  const auto &in = topology.edges[t.in_edge];
  const auto &out = topology.edges[t.out_edge];
  return angle_gradient(positions[in.source], positions[in.receiver],
                        positions[out.receiver]);
}

} // namespace egnpar
