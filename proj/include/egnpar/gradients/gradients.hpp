// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/system.hpp"
#include "egnpar/model/engine.hpp"

#include <memory>

namespace egnpar {

/// dL/dtheta and dL/dx for one backward pass. With an energy seed of 1 and no
/// force seed, d_positions is dE/dx.
struct GradientBundle {
  ModelParams d_params;
  Matrix d_positions;

  bool all_finite() const { return d_params.all_finite() && d_positions.all_finite(); }
};

/// Reverse sweep through a recorded forward pass.
inline GradientBundle backward(Program &program, double energy_seed = 1.0,
                               const Matrix *force_seed = nullptr,
                               bool verify_replay = false) {
  program.backward(energy_seed, force_seed, verify_replay);
  GradientBundle g{program.param_grads(), program.position_grads()};
  if (!g.all_finite())
    throw NumericError("non-finite gradient");
  return g;
}

/// Energy and dE/dx of the sequential engine at a fixed topology.
struct EnergyGradient {
  double energy = 0.0;
  Matrix d_positions;
};

inline EnergyGradient energy_and_position_gradient(
    const AtomicSystem &system, const ModelParams &params, const ModelConfig &config,
    std::shared_ptr<const GraphTopology> topology) {
  SequentialEngine eng(params, config, std::move(topology), system.atomic_numbers,
                       system.position_matrix(), {false, true});
  eng.program().backward(1.0);
  return {eng.program().energy(), eng.program().position_grads()};
}

/// f = -dE/dx with the graph built once at the input positions.
inline Matrix forces_energy_centric(const AtomicSystem &system, const ModelParams &params,
                                    const ModelConfig &config) {
  auto topo = std::make_shared<const GraphTopology>(
      build_graph(system, config.cutoff).topology);
  auto eg = energy_and_position_gradient(system, params, config, std::move(topo));
  Matrix f = eg.d_positions;
  for (auto &x : f.flat())
    x = -x;
  if (!f.all_finite())
    throw NumericError("non-finite force");
  return f;
}

/// Closed-form geometry derivatives for every edge and triplet.
struct GeometryGradients {
  std::vector<DistanceGradient> distances;
  std::vector<AngleGradient> angles;
};

inline GeometryGradients geometry_grads(const std::vector<Vec3> &positions,
                                        const GraphTopology &topology) {
  GeometryGradients g;
  g.distances.reserve(topology.num_edges());
  for (const auto &e : topology.edges)
    g.distances.push_back(distance_gradient(positions, e));
  g.angles.reserve(topology.num_triplets());
  for (const auto &t : topology.triplets)
    g.angles.push_back(angle_gradient(positions, topology, t));
  return g;
}

} // namespace egnpar
